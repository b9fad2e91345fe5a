"""Constants for prompt templates, vocabulary pools, and report formatting."""
import hashlib
import string
from pathlib import Path

TEMPLATE_DIR = Path(__file__).parent / "templates"
TEMPLATE_VERSION = "v1"
TEMPLATE_FILE = TEMPLATE_DIR / f"bundle_prompt_{TEMPLATE_VERSION}.txt"

# Changing any of these strings is a breaking change: results are only
# comparable across identical template hashes.
BUNDLE_PROMPT_TEMPLATE = TEMPLATE_FILE.read_text(encoding="utf-8")
INSTRUCTION = (
    "Pick the candidate that best completes the bundle of seed items. "
    "Answer with the option letter."
)
ANSWER_CUE = "Answer:"
TEXTUAL_SEPARATOR = "content token:"
MODALITY_INDICATORS = {
    "media": "media token:",
    "ui": "user token:",
    "bi": "bundle token:",
}
BUNDLE_SENTENCE_PREFIX = "bundle:"

OPTION_LETTERS = string.ascii_uppercase
MAX_CANDIDATES = len(OPTION_LETTERS)
MAX_SEED_INDICATOR = 26


def get_template_hash() -> str:
    """SHA-256 over the template asset and every string spliced into it."""
    digest = hashlib.sha256()
    for part in (
        BUNDLE_PROMPT_TEMPLATE,
        INSTRUCTION,
        ANSWER_CUE,
        TEXTUAL_SEPARATOR,
        *MODALITY_INDICATORS.values(),
    ):
        digest.update(part.encode("utf-8"))
        digest.update(b"\x00")
    return digest.hexdigest()


# Synthetic item vocabulary. Styles are the attribute that makes a bundle
# coherent; categories keep items within a bundle distinct.
STYLE_WORDS = [
    "crimson", "navy", "olive", "ivory", "amber", "teal",
    "violet", "charcoal", "coral", "mustard", "silver", "burgundy",
]
CATEGORY_WORDS = [
    "hat", "scarf", "jacket", "sweater", "skirt", "trousers",
    "boots", "sneakers", "bag", "belt", "gloves", "shirt",
]
FILLER_WORDS = [
    "classic", "soft", "light", "slim", "cozy", "urban",
    "vintage", "casual", "sturdy", "plain", "woven", "knit",
]


def format_metrics_line(label: str, metrics: dict) -> str:
    """One-line summary used in logs and the CLI."""
    line = (
        f"{label}: HitRate@1={metrics['hit_rate_at_1']:.4f} "
        f"ValidRatio={metrics['valid_ratio']:.4f} "
        f"(n={metrics['n_instances']})"
    )
    if "mean_seconds" in metrics:
        line += f" {1000 * metrics['mean_seconds']:.2f} ms/instance"
    return line


def format_table(rows: list, columns: list) -> str:
    """Plain-text table for the ablation and sweep summaries."""
    if not rows:
        return "(no rows)"
    widths = [
        max(len(str(col)), *(len(_cell(row.get(col))) for row in rows))
        for col in columns
    ]
    header = "  ".join(str(col).ljust(w) for col, w in zip(columns, widths))
    lines = [header, "  ".join("-" * w for w in widths)]
    for row in rows:
        lines.append("  ".join(_cell(row.get(col)).ljust(w) for col, w in zip(columns, widths)))
    return "\n".join(lines)


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return "" if value is None else str(value)
