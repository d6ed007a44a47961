"""Corpus construction: vendor-count labels, manifests, historical time splits and a
synthetic needle-in-haystack generator for desk-scale experiments.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .tokenizer import TOKEN_PATTERN

log = logging.getLogger(__name__)

# first twelve are the families reported per-family; the rest fill the 25 tag heads
DEFAULT_TAGS: Tuple[str, ...] = (
    "Code Injection XSS", "Browser Exploit", "iFrame Mischief", "Malicious Browser Redirect",
    "Blackhat SEO", "Ramnit Malware Family", "Fake JQuery", "Facebook Hacking",
    "Changes Browser Startpage", "Ransomware", "Auto Click", "Phishing",
    "Exploit Kit", "Cryptominer", "Malvertising", "Obfuscated Script", "Drive-by Download",
    "Clickjacking", "Fake Antivirus", "Tech Support Scam", "Pharmacy Spam", "Web Skimmer",
    "Adware", "Defacement", "Fake Update",
)

DAY = 86400.0
# two months
DEFAULT_HORIZON = 61 * DAY
UNKNOWN_TAGS = "?"


class Label(str, enum.Enum):
    BENIGN = "benign"
    MALICIOUS = "malicious"
    INDETERMINATE = "indeterminate"


def label_from_detections(count: int) -> Label:
    """0 vendor detections is benign, 3 or more malicious, 1-2 indeterminate."""
    if count < 0:
        raise ValueError(f"detection count cannot be negative: {count}")
    if count == 0:
        return Label.BENIGN
    if count <= 2:
        return Label.INDETERMINATE
    return Label.MALICIOUS


@dataclass
class DocumentRecord:
    sha256: str
    first_seen: float
    detection_count: int
    tags: FrozenSet[str] = frozenset()
    path: Optional[str] = None
    content: Optional[bytes] = field(default=None, repr=False)
    tags_known: bool = True

    def __post_init__(self):
        self.tags = frozenset(self.tags)
        self.label = label_from_detections(self.detection_count)

    def read(self, root: Union[str, Path, None] = None) -> bytes:
        if self.content is not None:
            return self.content
        if self.path is None:
            raise FileNotFoundError(f"record {self.sha256} has neither content nor path")
        p = Path(self.path)
        if root is not None and not p.is_absolute():
            p = Path(root) / p
        return p.read_bytes()


def targets_for(record: DocumentRecord, registry: Sequence[str] = DEFAULT_TAGS) -> Tuple[np.ndarray, np.ndarray]:
    """Head targets and known-mask: head 0 is maliciousness, heads 1.. follow ``registry``."""
    n = 1 + len(registry)
    y = np.zeros(n)
    mask = np.ones(n)
    y[0] = 1.0 if record.label is Label.MALICIOUS else 0.0
    if record.tags_known:
        for i, tag in enumerate(registry, start=1):
            y[i] = 1.0 if tag in record.tags else 0.0
    else:
        mask[1:] = 0.0
    return y, mask


# --- manifests --------------------------------------------------------------------

MANIFEST_FIELDS = ("hash", "path", "first_seen", "detection_count", "tags")


class ManifestError(ValueError):
    def __init__(self, problems: List[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


class ManifestWarning(UserWarning):
    pass


def _parse_tags(field_value: str) -> Tuple[FrozenSet[str], bool]:
    field_value = (field_value or "").strip()
    if field_value == UNKNOWN_TAGS:
        return frozenset(), False
    return frozenset(t.strip() for t in field_value.split(";") if t.strip()), True


def load_manifest(path: Union[str, Path], check_files: bool = True) -> List[DocumentRecord]:
    """Read and validate a manifest.

    Duplicate hashes keep the earliest-seen record (file order breaks ties)
    and emit a ``ManifestWarning``. Malformed rows and missing content files
    are collected and raised together as a ``ManifestError``.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return []
    problems: List[str] = []
    kept: Dict[str, DocumentRecord] = {}
    reader = csv.DictReader(text.splitlines())
    missing_cols = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
    if missing_cols:
        raise ManifestError([f"line 1: missing columns {sorted(missing_cols)}"])
    for lineno, row in enumerate(reader, start=2):
        try:
            digest = row["hash"].strip().lower()
            if len(digest) != 64 or any(c not in "0123456789abcdef" for c in digest):
                raise ValueError(f"bad sha256 {row['hash']!r}")
            tags, known = _parse_tags(row["tags"])
            rec = DocumentRecord(digest, float(row["first_seen"]), int(row["detection_count"]),
                                 tags, row["path"].strip() or None, tags_known=known)
        except (ValueError, TypeError, AttributeError) as exc:
            problems.append(f"line {lineno}: {exc}")
            continue
        if check_files and rec.path is not None:
            p = Path(rec.path)
            if not p.is_absolute():
                p = path.parent / p
            if not p.is_file():
                problems.append(f"line {lineno}: content file {rec.path} not found for {digest}")
                continue
        prev = kept.get(digest)
        if prev is not None:
            warnings.warn(f"line {lineno}: duplicate hash {digest}; keeping earliest submission",
                          ManifestWarning, stacklevel=2)
            if rec.first_seen < prev.first_seen:
                kept[digest] = rec
            continue
        kept[digest] = rec
    if problems:
        raise ManifestError(problems)
    return list(kept.values())


def write_manifest(path: Union[str, Path], records: Iterable[DocumentRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            tags = ";".join(sorted(r.tags)) if r.tags_known else UNKNOWN_TAGS
            w.writerow([r.sha256, r.path or "", repr(float(r.first_seen)), r.detection_count, tags])


def time_split(records: Sequence[DocumentRecord], cutoff: float,
               horizon: float = DEFAULT_HORIZON) -> Tuple[List[DocumentRecord], List[DocumentRecord]]:
    """Train on records first seen before ``cutoff``, test on ``[cutoff, cutoff + horizon)``.

    Indeterminate records are dropped from both sides.
    """
    train, test = [], []
    for r in records:
        if r.label is Label.INDETERMINATE:
            continue
        if r.first_seen < cutoff:
            train.append(r)
        elif r.first_seen < cutoff + horizon:
            test.append(r)
    if not train:
        warnings.warn("time split produced an empty training set", stacklevel=2)
    if not test:
        warnings.warn("time split produced an empty test set", stacklevel=2)
    return train, test


# --- synthetic corpus -------------------------------------------------------------

FAMILY_VOCAB: Dict[str, Tuple[str, ...]] = {
    "Code Injection XSS": ("eval", "unescape", "String", "fromCharCode", "cookie", "atob",
                           "escape", "onerror", "alert", "innerHTML", "charCodeAt"),
    "Browser Exploit": ("ActiveXObject", "shellcode", "spray", "heap", "u9090", "u0c0c",
                        "CollectGarbage", "vbscript", "CreateObject", "memory", "nopslide"),
    "iFrame Mischief": ("iframe", "width", "height", "visibility", "hidden", "frameborder",
                        "position", "absolute", "left", "top", "createElement"),
    "Malicious Browser Redirect": ("window", "location", "href", "replace", "setTimeout",
                                   "referrer", "navigator", "userAgent", "redirect", "meta", "refresh"),
    "Blackhat SEO": ("casino", "viagra", "cheap", "pills", "display", "none", "loans", "replica",
                     "bonus", "cialis", "payday"),
    "Ramnit Malware Family": ("WriteData", "DropFileName", "svchost", "exe", "WScript", "Shell",
                              "CreateObject", "Scripting", "FileSystemObject", "Run", "TEMP"),
    "Fake JQuery": ("jquery", "min", "jQuery", "fn", "extend", "eval", "function", "p", "a", "c",
                    "k", "e", "r", "split"),
    "Facebook Hacking": ("facebook", "graph", "fb_dtsg", "like", "share", "uid", "clickjack",
                         "opacity", "follow", "friends", "token"),
    "Changes Browser Startpage": ("homepage", "startpage", "setHomePage", "search", "toolbar",
                                  "default", "extension", "newtab", "provider"),
    "Ransomware": ("bitcoin", "decrypt", "ransom", "files", "encrypted", "payment", "wallet",
                   "tor", "onion", "deadline"),
    "Auto Click": ("click", "dispatchEvent", "MouseEvent", "createEvent", "initMouseEvent",
                   "autoclick", "ads", "banner", "trigger"),
    "Phishing": ("password", "login", "verify", "account", "paypal", "signin", "suspended",
                 "confirm", "bank", "security", "update"),
}

# relative family frequency among synthetic malware
FAMILY_WEIGHTS: Dict[str, float] = {
    "Code Injection XSS": 16.1, "Browser Exploit": 14.4, "iFrame Mischief": 14.9,
    "Malicious Browser Redirect": 3.3, "Blackhat SEO": 49.6, "Ramnit Malware Family": 39.7,
    "Fake JQuery": 2.0, "Facebook Hacking": 13.8, "Changes Browser Startpage": 5.2,
    "Ransomware": 2.0, "Auto Click": 2.0, "Phishing": 2.0,
}

# tokens that benign pages use routinely; several also appear in malicious snippets
BENIGN_SCRIPT_WORDS = (
    "var", "function", "return", "document", "getElementById", "addEventListener", "window",
    "location", "href", "src", "width", "height", "click", "jquery", "min", "js", "search",
    "login", "password", "account", "share", "like", "display", "none", "top", "left",
    "setTimeout", "createElement", "innerHTML", "split", "replace", "update", "security",
)

# companion tag for each primary family, drawn from the non-leaderboard part of the registry
COMPANION_TAGS: Dict[str, str] = {
    "Code Injection XSS": "Obfuscated Script", "Browser Exploit": "Exploit Kit",
    "iFrame Mischief": "Malvertising", "Malicious Browser Redirect": "Drive-by Download",
    "Blackhat SEO": "Pharmacy Spam", "Ramnit Malware Family": "Defacement",
    "Fake JQuery": "Web Skimmer", "Facebook Hacking": "Clickjacking",
    "Changes Browser Startpage": "Adware", "Ransomware": "Fake Update",
    "Auto Click": "Cryptominer", "Phishing": "Tech Support Scam",
}

_SYLLABLES = ("ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "be", "da", "fo", "gu", "ha",
              "je", "pi", "qu", "ze", "xa", "wo", "yu", "con", "tra", "ment", "ing", "pro",
              "ver", "ex", "ul", "an", "or")
_NON_ASCII_WORDS = ("café", "naïve", "größe", "niño", "déjà", "日本語", "中文", "русский",
                    "ελληνικά", "العربية", "한국어", "résumé")
_TLDS = ("com", "org", "net", "de", "io", "info")


@dataclass
class SyntheticSpec:
    n_documents: int = 1000
    malicious_fraction: float = 0.5
    indeterminate_fraction: float = 0.02
    vocab_size: int = 4000
    zipf_exponent: float = 1.1
    # heavy-tailed document length in tokens (log-normal, clipped)
    doc_tokens_median: float = 800.0
    doc_tokens_sigma: float = 1.0
    doc_tokens_min: int = 48
    doc_tokens_max: int = 30000
    # snippet length in tokens, uniform on [min, max]; 0/0 disables the signal
    snippet_tokens_min: int = 6
    snippet_tokens_max: int = 20
    # optional per-page cap: pages are lengthened so a snippet stays below this share
    # of the tokens; 1.0 leaves lengths alone (the default keeps the average share < 5%)
    max_snippet_fraction: float = 1.0
    # position of the snippet as a fraction of the document, uniform on [lo, hi]
    injection_lo: float = 0.0
    injection_hi: float = 1.0
    # chance that a benign page carries suspicious tokens scattered across it; the
    # tokens match a snippet's count but each is drawn from the whole family mixture
    decoy_probability: float = 1.0
    decoy_cluster_max: int = 3
    # chance that a malicious page also carries its family's companion tag
    second_tag_probability: float = 0.3
    start_time: float = 1483228800.0  # 2017-01-01 UTC
    span_days: float = 300.0
    seed: int = 0

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SyntheticSpec":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class SyntheticDocument:
    record: DocumentRecord
    content: bytes
    snippet_tokens: int  # tokens belonging to the injected snippet (0 for benign)
    total_tokens: int


def _count_tokens(text: str) -> int:
    return len(TOKEN_PATTERN.findall(text.encode("utf-8")))


class _Generator:
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        words = set()
        while len(words) < spec.vocab_size:
            k = int(self.rng.integers(2, 5))
            words.add("".join(self.rng.choice(_SYLLABLES, size=k)))
        self.vocab = sorted(words)
        ranks = np.arange(1, len(self.vocab) + 1, dtype=np.float64)
        p = ranks ** -spec.zipf_exponent
        self.word_cdf = np.cumsum(p / p.sum())
        self.families = list(FAMILY_VOCAB)
        fw = np.array([FAMILY_WEIGHTS[f] for f in self.families])
        self.family_cdf = np.cumsum(fw / fw.sum())

    # benign scaffolding

    def words(self, n: int) -> str:
        idx = np.searchsorted(self.word_cdf, self.rng.random(n), side="right")
        vocab = self.vocab
        return " ".join(vocab[min(i, len(vocab) - 1)] for i in idx)

    def hexstr(self, n: int) -> str:
        return self.rng.bytes((n + 1) // 2).hex()[:n]

    def segment(self) -> str:
        r = self.rng
        kind = int(r.integers(0, 8))
        w = lambda n: self.words(n)  # noqa: E731
        if kind == 0:
            return f'<div class="{w(1)} {w(1)}"><h2>{w(int(r.integers(2, 6)))}</h2><p>{w(int(r.integers(8, 40)))}</p></div>'
        if kind == 1:
            return (f'<a href="https://{w(1)}.{r.choice(_TLDS)}/{w(1)}/{w(1)}.html" '
                    f'title="{w(2)}">{w(int(r.integers(1, 4)))}</a>')
        if kind == 2:
            items = "".join(f"<li>{w(int(r.integers(1, 5)))}</li>" for _ in range(int(r.integers(2, 6))))
            return f"<ul>{items}</ul>"
        if kind == 3:
            return f'<img src="/img/{w(1)}{int(r.integers(0, 999))}.png" alt="{w(2)}" width="{int(r.integers(16, 800))}">'
        if kind == 4:
            script = self.rng.choice(BENIGN_SCRIPT_WORDS, size=int(r.integers(3, 8)))
            return (f"<script>var {w(1)} = document.getElementById('{w(1)}'); "
                    f"{' '.join(script)}; function {w(1)}(e) {{ return {w(1)}; }}</script>")
        if kind == 5:
            return f".{w(1)} {{ margin: 0 auto; color: #{self.hexstr(6)}; font-size: {int(r.integers(8, 30))}px; }}"
        if kind == 6:
            text = " ".join(r.choice(_NON_ASCII_WORDS, size=int(r.integers(2, 8))))
            return f"<p lang=\"x\">{text} {w(int(r.integers(2, 10)))}</p>"
        return f'<meta name="{w(1)}" content="{w(int(r.integers(2, 8)))}">'

    def head(self) -> str:
        return (f'<!DOCTYPE html><html lang="en"><head><meta charset="utf-8">'
                f"<title>{self.words(int(self.rng.integers(2, 7)))}</title>"
                f'<link rel="stylesheet" href="/static/{self.words(1)}.css"></head><body>')

    # malicious content

    def snippet_tokens(self, family: str, n: int) -> List[str]:
        vocab = FAMILY_VOCAB[family]
        out = []
        for _ in range(n):
            u = self.rng.random()
            if u < 0.15:
                out.append(self.hexstr(int(self.rng.integers(8, 40))))
            elif u < 0.25:
                out.append("x" + self.hexstr(int(self.rng.integers(4, 10))))
            else:
                out.append(str(self.rng.choice(vocab)))
        return out

    def pick_family(self) -> str:
        i = int(np.searchsorted(self.family_cdf, self.rng.random(), side="right"))
        return self.families[min(i, len(self.families) - 1)]

    def document(self, label: Label, snippet_len: int,
                 record_label: Optional[Label] = None) -> SyntheticDocument:
        """One page whose content follows ``label``; ``record_label`` sets the vendor count."""
        spec, r = self.spec, self.rng
        record_label = record_label or label
        target = int(np.clip(round(r.lognormal(np.log(spec.doc_tokens_median), spec.doc_tokens_sigma)),
                             spec.doc_tokens_min, spec.doc_tokens_max))
        # snippet_len is drawn for both classes, so this floor does not leak the label
        target = max(target, int(snippet_len / spec.max_snippet_fraction) + 1)
        decoy: List[List[str]] = []
        tags: set = set()
        snippet: List[str] = []
        if label is Label.MALICIOUS:
            family = self.pick_family()
            tags.add(family)
            if r.random() < spec.second_tag_probability:
                tags.add(COMPANION_TAGS[family])
            snippet = self.snippet_tokens(family, snippet_len)
        elif snippet_len > 0 and r.random() < spec.decoy_probability:
            # same per-token marginals as a snippet, but no family coherence and no locality
            toks = [self.snippet_tokens(self.pick_family(), 1)[0] for _ in range(snippet_len)]
            while toks:
                k = int(r.integers(1, spec.decoy_cluster_max + 1))
                decoy.append(toks[:k])
                toks = toks[k:]
        n_decoy = sum(len(c) for c in decoy)

        # filler is sized so that both classes end up with the same length distribution
        budget = target - len(snippet) - n_decoy
        segments = [self.head()]
        n = _count_tokens(segments[0])
        while n < budget:
            seg = self.segment()
            segments.append(seg)
            n += _count_tokens(seg)
        segments.append("</body></html>")

        for cluster in decoy:
            i = int(r.integers(1, len(segments)))
            segments[i] = f"{segments[i]} " + " ".join(cluster)

        n_snip = 0
        if snippet:
            # join with punctuation only, so the snippet adds exactly its own tokens
            body = "(" + ");(".join(snippet) + ")"
            pos = r.uniform(spec.injection_lo, spec.injection_hi)
            i = 1 + int(pos * (len(segments) - 1))
            segments.insert(min(i, len(segments) - 1), f"<{body}>")
            n_snip = _count_tokens(body)

        content = "\n".join(segments).encode("utf-8")
        digest = hashlib.sha256(content).hexdigest()
        if record_label is Label.MALICIOUS:
            detections = 3 + int(r.geometric(0.15)) - 1
        elif record_label is Label.INDETERMINATE:
            detections = int(r.integers(1, 3))
        else:
            detections = 0
        first_seen = spec.start_time + r.uniform(0.0, spec.span_days * DAY)
        rec = DocumentRecord(digest, float(first_seen), detections,
                             frozenset(tags) if record_label is Label.MALICIOUS else frozenset(),
                             content=content)
        return SyntheticDocument(rec, content, n_snip, _count_tokens(content.decode("utf-8")))


def generate_synthetic(spec: SyntheticSpec) -> List[SyntheticDocument]:
    """Deterministic synthetic corpus: benign pages, some carrying an injected snippet.

    Every suspicious token has the same expected count in both classes. A
    malicious page holds one contiguous snippet from a single family; a benign
    page holds the same number of tokens, each from a randomly drawn family,
    scattered in small clusters. Only co-occurrence and locality separate them.
    """
    if spec.snippet_tokens_min < 0 or spec.snippet_tokens_max < spec.snippet_tokens_min:
        raise ValueError("invalid snippet length range")
    if not 0.0 < spec.max_snippet_fraction <= 1.0:
        raise ValueError("max_snippet_fraction must lie in (0, 1]")
    gen = _Generator(spec)
    docs: List[SyntheticDocument] = []
    seen = set()
    for _ in range(spec.n_documents):
        u = gen.rng.random()
        if u < spec.indeterminate_fraction:
            label = Label.INDETERMINATE
        elif u < spec.indeterminate_fraction + (1 - spec.indeterminate_fraction) * spec.malicious_fraction:
            label = Label.MALICIOUS
        else:
            label = Label.BENIGN
        snippet_len = int(gen.rng.integers(spec.snippet_tokens_min, spec.snippet_tokens_max + 1))
        # indeterminate files look like either class; their content is never trained on
        doc_label = Label.MALICIOUS if label is Label.INDETERMINATE and gen.rng.random() < 0.5 else label
        doc = gen.document(doc_label, snippet_len, record_label=label)
        if doc.record.sha256 in seen:
            continue
        seen.add(doc.record.sha256)
        docs.append(doc)
    return docs


def write_corpus(docs: Sequence[SyntheticDocument], out_dir: Union[str, Path],
                 spec: Optional[SyntheticSpec] = None) -> Path:
    """Write ``docs/<sha256>.html`` files plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "docs").mkdir(parents=True, exist_ok=True)
    records = []
    for d in docs:
        rel = f"docs/{d.record.sha256}.html"
        (out / rel).write_bytes(d.content)
        rec = DocumentRecord(d.record.sha256, d.record.first_seen, d.record.detection_count,
                             d.record.tags, rel, tags_known=d.record.tags_known)
        records.append(rec)
    manifest = out / "manifest.csv"
    write_manifest(manifest, records)
    if spec is not None:
        (out / "synthetic_spec.json").write_text(spec.to_json() + "\n")
    return manifest
