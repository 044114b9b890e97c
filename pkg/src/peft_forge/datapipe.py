"""Temporal image pairs from satellite metadata, and their conversational annotations.

Pipeline: ingest metadata -> drop oversized images -> pair images of the same
location that are at least 12 months apart -> split -> write annotation
requests -> join annotator responses -> emit LLaVA-style records.

Metadata schema (CSV with a header row, or JSON Lines with the same keys):

=============  ==========================================================
image_id       unique string
location_id    string shared by every image of one site
timestamp      ISO date ``YYYY-MM-DD`` or ISO datetime; datetimes with an
               offset (or ``Z``) are converted to UTC, then truncated to a date
byte_size      positive integer, bytes
category       land-use class label
width, height  positive integers, pixels
=============  ==========================================================

Month gap between dates d1 <= d2::

    gap = (y2 - y1) * 12 + (m2 - m1) - (1 if day2 < day1 else 0)

A pair qualifies when ``gap >= 12``.
"""

from __future__ import annotations

import csv
import json
import uuid
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timezone
from importlib import resources
from pathlib import Path

from .errors import ConsistencyError, FormatError, ParameterError
from .numerics import SeededRng

MIN_GAP_MONTHS = 12
DEFAULT_MAX_BYTES = 1_048_576
REVIEW_THRESHOLD = 9
MAX_LENGTH = 400
REFERENCE_TRAIN_PAIRS = 100_000
REFERENCE_TEST_PAIRS = 6_042
VIDEO_TOKEN = "<video>"
ANNOTATION_PROMPT = ("Briefly describe each image independently, "
                     "then explain the changes happening between them.")
REQUESTS_FORMAT = "peft-forge/annotation-requests"
RESPONSES_FORMAT = "peft-forge/annotation-responses"
FIELDS = ("image_id", "location_id", "timestamp", "byte_size", "category", "width", "height")
_ID_NAMESPACE = uuid.UUID("6f1d3a52-8a4e-5b7c-9e0f-2d4c6b8a1e30")


@dataclass(frozen=True, order=True)
class MetadataRecord:
    image_id: str
    location_id: str
    timestamp: date
    byte_size: int
    category: str
    width: int
    height: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["timestamp"] = self.timestamp.isoformat()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetadataRecord":
        missing = [f for f in FIELDS if f not in d]
        if missing:
            raise ValueError(f"missing fields {missing}")
        rec = cls(image_id=str(d["image_id"]).strip(), location_id=str(d["location_id"]).strip(),
                  timestamp=parse_timestamp(str(d["timestamp"])), byte_size=int(d["byte_size"]),
                  category=str(d["category"]).strip(), width=int(d["width"]), height=int(d["height"]))
        if not rec.image_id or not rec.location_id:
            raise ValueError("empty image_id or location_id")
        if rec.byte_size <= 0:
            raise ValueError(f"byte_size must be positive, got {rec.byte_size}")
        if rec.width <= 0 or rec.height <= 0:
            raise ValueError(f"width and height must be positive, got {rec.width}x{rec.height}")
        return rec


def parse_timestamp(raw: str) -> date:
    raw = raw.strip()
    if len(raw) == 10:
        return date.fromisoformat(raw)
    dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc)
    return dt.date()


@dataclass
class Reject:
    line: int
    reason: str
    raw: str


@dataclass
class IngestResult:
    records: list
    rejects: list


def ingest_metadata(path) -> IngestResult:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"metadata file not found: {p}")
    rows = _read_jsonl_rows(p) if p.suffix in (".jsonl", ".json") else _read_csv_rows(p)
    records, rejects, seen = [], [], set()
    for lineno, raw, row in rows:
        if "__error__" in row:
            rejects.append(Reject(lineno, row["__error__"], raw))
            continue
        try:
            rec = MetadataRecord.from_dict(row)
        except (ValueError, TypeError) as exc:
            rejects.append(Reject(lineno, str(exc), raw))
            continue
        if rec.image_id in seen:
            rejects.append(Reject(lineno, f"duplicate image_id {rec.image_id!r}", raw))
            continue
        seen.add(rec.image_id)
        records.append(rec)
    return IngestResult(records, rejects)


def _read_csv_rows(p: Path):
    with p.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{p}:1: empty metadata file, expected a header row") from None
        except csv.Error as exc:
            raise FormatError(f"{p}:1: {exc}") from exc
        header = [h.strip() for h in header]
        missing = [f for f in FIELDS if f not in header]
        if missing:
            raise FormatError(f"{p}:1: header lacks required columns {missing}")
        out = []
        while True:
            try:
                cols = next(reader)
            except StopIteration:
                break
            except csv.Error as exc:
                raise FormatError(f"{p}:{reader.line_num}: {exc}") from exc
            if not cols:
                continue
            raw = ",".join(cols)
            if len(cols) != len(header):
                out.append((reader.line_num, raw, {"__error__": f"expected {len(header)} columns, got {len(cols)}"}))
                continue
            out.append((reader.line_num, raw, dict(zip(header, cols))))
    return out


def _read_jsonl_rows(p: Path):
    out = []
    with p.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{p}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise FormatError(f"{p}:{lineno}: expected a JSON object per line")
            out.append((lineno, line.rstrip("\n"), obj))
    return out


# ---- pairing ----------------------------------------------------------------

def month_gap(first: date, second: date) -> int:
    gap = (second.year - first.year) * 12 + (second.month - first.month)
    return gap - 1 if second.day < first.day else gap


@dataclass(frozen=True)
class ImagePair:
    first: MetadataRecord
    second: MetadataRecord
    gap_months: int

    @property
    def pair_id(self) -> str:
        return f"{self.first.image_id}__{self.second.image_id}"

    @property
    def location_id(self) -> str:
        return self.first.location_id

    @property
    def video(self) -> str:
        return f"{self.location_id}_{self.first.image_id}_{self.second.image_id}.mp4"

    def to_dict(self) -> dict:
        return {"pair_id": self.pair_id, "gap_months": self.gap_months,
                "first": self.first.to_dict(), "second": self.second.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ImagePair":
        first = MetadataRecord.from_dict(d["first"])
        second = MetadataRecord.from_dict(d["second"])
        pair = cls(first, second, month_gap(first.timestamp, second.timestamp))
        problem = validate_pair(pair)
        if problem:
            raise ValueError(problem)
        return pair


def validate_pair(pair: ImagePair) -> str | None:
    """Return a reason the pair is invalid, or None."""
    if pair.first.location_id != pair.second.location_id:
        return "images come from different locations"
    if not pair.second.timestamp > pair.first.timestamp:
        return "second image is not strictly later"
    gap = month_gap(pair.first.timestamp, pair.second.timestamp)
    if gap != pair.gap_months:
        return f"recorded gap {pair.gap_months} differs from computed gap {gap}"
    if gap < MIN_GAP_MONTHS:
        return f"gap of {gap} months is under {MIN_GAP_MONTHS}"
    return None


def _by_location(records) -> dict:
    groups: dict = {}
    for rec in records:
        groups.setdefault(rec.location_id, []).append(rec)
    for recs in groups.values():
        recs.sort(key=lambda r: (r.timestamp, r.image_id))
    return groups


def make_pairs(records) -> list[ImagePair]:
    """Chain-walk each location: pair the anchor with the earliest image >= 12 months later.

    The partner becomes the next anchor. Output is sorted by location, then by
    the first image's timestamp.
    """
    pairs = []
    for loc, recs in sorted(_by_location(records).items()):
        anchor = 0
        while anchor < len(recs):
            partner = next((j for j in range(anchor + 1, len(recs))
                            if month_gap(recs[anchor].timestamp, recs[j].timestamp) >= MIN_GAP_MONTHS), None)
            if partner is None:
                break
            a, b = recs[anchor], recs[partner]
            pairs.append(ImagePair(a, b, month_gap(a.timestamp, b.timestamp)))
            anchor = partner
    return pairs


def filter_size(records, max_bytes: int = DEFAULT_MAX_BYTES) -> tuple[list, list]:
    """Split into (kept, excluded); only images strictly larger than ``max_bytes`` go."""
    if max_bytes <= 0:
        raise ParameterError(f"max_bytes must be positive, got {max_bytes}")
    kept, excluded = [], []
    for rec in records:
        (excluded if rec.byte_size > max_bytes else kept).append(rec)
    return kept, excluded


@dataclass(frozen=True)
class ReviewScore:
    pair_id: str
    score: int

    def __post_init__(self):
        if not isinstance(self.score, int) or not 0 <= self.score <= 10:
            raise ParameterError(f"review score must be an integer in [0, 10], got {self.score!r}")


@dataclass
class ReviewResult:
    kept: list
    dropped: list  # (pair_id, reason)


def filter_review(pairs, scores, threshold: int = REVIEW_THRESHOLD, split: str = "test",
                  keep_missing: bool | None = None) -> ReviewResult:
    """Keep pairs scoring at least ``threshold``.

    Unscored pairs are dropped for the test split and kept for train, unless
    ``keep_missing`` says otherwise.
    """
    if split not in ("train", "test"):
        raise ParameterError(f"split must be 'train' or 'test', got {split!r}")
    if keep_missing is None:
        keep_missing = split == "train"
    table: dict = {}
    for s in scores:
        if s.pair_id in table and table[s.pair_id] != s.score:
            raise ConsistencyError(f"conflicting review scores for pair {s.pair_id!r}")
        table[s.pair_id] = s.score
    kept, dropped = [], []
    for pair in pairs:
        score = table.get(pair.pair_id)
        if score is None:
            if keep_missing:
                kept.append(pair)
            else:
                dropped.append((pair.pair_id, f"no review score ({split} split drops unscored pairs)"))
        elif score >= threshold:
            kept.append(pair)
        else:
            dropped.append((pair.pair_id, f"score {score} below threshold {threshold}"))
    return ReviewResult(kept, dropped)


@dataclass
class SplitResult:
    train: list
    test: list
    manifest: dict


def build_splits(pairs, train_count: int, test_count: int, seed: int,
                 location_disjoint: bool = False) -> SplitResult:
    """Seeded split into disjoint train and test pair lists.

    By default disjointness is per pair. With ``location_disjoint`` whole
    locations are assigned to the test side until it holds ``test_count``
    pairs; surplus pairs from the last test location are discarded.
    """
    pairs = list(pairs)
    if train_count < 0 or test_count < 0:
        raise ParameterError("split counts must be non-negative")
    if train_count + test_count > len(pairs):
        raise ParameterError(f"requested {train_count} train + {test_count} test pairs "
                             f"but only {len(pairs)} are available")
    ids = [p.pair_id for p in pairs]
    if len(set(ids)) != len(ids):
        raise ConsistencyError("duplicate pair ids in split input")
    rng = SeededRng(seed)
    if not location_disjoint:
        perm = rng.permutation(len(pairs))
        test = [pairs[i] for i in perm[:test_count]]
        train = [pairs[i] for i in perm[test_count:test_count + train_count]]
    else:
        groups: dict = {}
        for p in pairs:
            groups.setdefault(p.location_id, []).append(p)
        locs = sorted(groups)
        order = [locs[i] for i in rng.permutation(len(locs))]
        test, rest = [], []
        for loc in order:
            if len(test) < test_count:
                test.extend(groups[loc])
            else:
                rest.extend(groups[loc])
        test = test[:test_count]
        if len(rest) < train_count:
            raise ParameterError(f"location-disjoint split leaves only {len(rest)} train pairs, "
                                 f"{train_count} requested")
        sub = rng.permutation(len(rest))
        train = [rest[i] for i in sub[:train_count]]
    canon = lambda ps: sorted(ps, key=lambda p: (p.location_id, p.first.timestamp, p.pair_id))
    train, test = canon(train), canon(test)
    manifest = {
        "seed": seed,
        "mode": "location" if location_disjoint else "pair",
        "available_pairs": len(pairs),
        "train_count": len(train),
        "test_count": len(test),
        "train_images": len({r.image_id for p in train for r in (p.first, p.second)}),
        "test_images": len({r.image_id for p in test for r in (p.first, p.second)}),
        "train_ids": [p.pair_id for p in train],
        "test_ids": [p.pair_id for p in test],
    }
    return SplitResult(train, test, manifest)


# ---- pair files ---------------------------------------------------------------

def write_pairs(path, pairs) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


def read_pairs(path) -> list[ImagePair]:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"pair file not found: {p}")
    out = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(ImagePair.from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{p}:{lineno}: invalid pair record ({exc})") from exc
    return out


def frame_manifest(pairs, image_dir: str = "images") -> list[dict]:
    """Video name, frame paths and an ffmpeg invocation that builds a 2-frame video."""
    out = []
    for p in pairs:
        frames = [f"{image_dir}/{r.image_id}.jpg" for r in (p.first, p.second)]
        concat = "|".join(frames)
        out.append({
            "video": p.video,
            "frames": frames,
            "command": (f"ffmpeg -y -framerate 1 -i 'concat:{concat}' "
                        f"-vf scale=trunc(iw/2)*2:trunc(ih/2)*2 -c:v libx264 -pix_fmt yuv420p {p.video}"),
        })
    return out


# ---- annotation requests and responses ----------------------------------------

@dataclass(frozen=True)
class AnnotationRequest:
    correlation_id: str
    pair_id: str
    video: str
    images: tuple
    prompt: str = ANNOTATION_PROMPT

    def to_dict(self) -> dict:
        return {"correlation_id": self.correlation_id, "pair_id": self.pair_id, "video": self.video,
                "images": list(self.images), "prompt": self.prompt}


def correlation_id(pair_id: str) -> str:
    return str(uuid.uuid5(_ID_NAMESPACE, pair_id))


def build_annotation_requests(pairs) -> list[AnnotationRequest]:
    reqs = [AnnotationRequest(correlation_id(p.pair_id), p.pair_id, p.video,
                              (p.first.image_id, p.second.image_id)) for p in pairs]
    if len({r.correlation_id for r in reqs}) != len(reqs):
        raise ConsistencyError("duplicate pairs produce duplicate correlation ids")
    return reqs


def write_requests(path, requests) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"format": REQUESTS_FORMAT, "version": 1, "count": len(requests)}) + "\n")
        for r in requests:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def _read_jsonl_with_header(path, fmt: str, header_required: bool) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"file not found: {p}")
    lines = [(i, l) for i, l in enumerate(p.read_text(encoding="utf-8").splitlines(), 1) if l.strip()]
    objs = []
    for lineno, line in lines:
        try:
            objs.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{p}:{lineno}: invalid JSON ({exc.msg})") from exc
    if objs and isinstance(objs[0][1], dict) and objs[0][1].get("format") == fmt:
        header = objs.pop(0)[1]
        if header.get("version") != 1:
            raise FormatError(f"{p}: unsupported {fmt} version {header.get('version')}")
        if "count" in header and header["count"] != len(objs):
            raise FormatError(f"{p}: header announces {header['count']} records, found {len(objs)}")
    elif header_required:
        raise FormatError(f"{p}:1: missing {fmt} header line")
    return objs


def read_requests(path) -> list[AnnotationRequest]:
    out = []
    for lineno, d in _read_jsonl_with_header(path, REQUESTS_FORMAT, True):
        try:
            out.append(AnnotationRequest(d["correlation_id"], d["pair_id"], d["video"],
                                         tuple(d["images"]), d["prompt"]))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: invalid request record ({exc})") from exc
    return out


def read_responses(path) -> list[dict]:
    """Response lines: ``{"correlation_id": ..., "text": ...}``; header line optional."""
    out = []
    for lineno, d in _read_jsonl_with_header(path, RESPONSES_FORMAT, False):
        if not isinstance(d, dict) or not isinstance(d.get("correlation_id"), str) \
                or not isinstance(d.get("text"), str):
            raise FormatError(f"{path}:{lineno}: response needs string 'correlation_id' and 'text'")
        out.append(d)
    return out


@dataclass
class AnnotationJoin:
    texts: dict  # pair_id -> annotation text
    unmatched: list  # response correlation ids with no request
    unanswered: list  # pair ids with no response


def ingest_annotation_responses(requests, responses) -> AnnotationJoin:
    by_id = {r.correlation_id: r for r in requests}
    seen = set()
    texts, unmatched = {}, []
    for resp in responses:
        cid = resp["correlation_id"]
        if cid in seen:
            raise ConsistencyError(f"duplicate correlation id {cid!r} in responses")
        seen.add(cid)
        req = by_id.get(cid)
        if req is None:
            unmatched.append(cid)
        else:
            texts[req.pair_id] = resp["text"]
    unanswered = [r.pair_id for r in requests if r.pair_id not in texts]
    return AnnotationJoin(texts, unmatched, unanswered)


# ---- conversational records ----------------------------------------------------

@dataclass(frozen=True)
class Turn:
    speaker: str  # "human" or "gpt"
    text: str


@dataclass(frozen=True)
class AnnotationRecord:
    id: str
    video: str
    conversations: tuple

    def to_dict(self) -> dict:
        return {"id": self.id, "video": self.video,
                "conversations": [{"from": t.speaker, "value": t.text} for t in self.conversations]}

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        turns = tuple(Turn(c["from"], c["value"]) for c in d["conversations"])
        rec = cls(id=d["id"], video=d["video"], conversations=turns)
        problem = validate_record(rec)
        if problem:
            raise ConsistencyError(f"record {rec.id!r}: {problem}")
        return rec


def validate_record(rec: AnnotationRecord) -> str | None:
    turns = rec.conversations
    if not turns:
        return "no conversation turns"
    for i, t in enumerate(turns):
        expected = "human" if i % 2 == 0 else "gpt"
        if t.speaker != expected:
            return f"turn {i} is {t.speaker!r}, expected {expected!r}"
    if turns[0].text.count(VIDEO_TOKEN) != 1:
        return f"first human turn must contain exactly one {VIDEO_TOKEN}"
    if any(VIDEO_TOKEN in t.text for t in turns[1:]):
        return f"{VIDEO_TOKEN} may only appear in the first human turn"
    return None


def load_templates(path=None) -> list[str]:
    if path is None:
        text = resources.files("peft_forge").joinpath("data/templates.txt").read_text(encoding="utf-8")
    else:
        p = Path(path)
        if not p.is_file():
            raise FormatError(f"template file not found: {p}")
        text = p.read_text(encoding="utf-8")
    templates = [line.strip() for line in text.splitlines() if line.strip()]
    if not templates:
        raise ParameterError("template list is empty")
    return templates


@dataclass
class EmitResult:
    records: list
    over_length: list = field(default_factory=list)


def emit_annotations(pairs, texts: dict, templates, seed: int = 0,
                     max_length: int = MAX_LENGTH) -> EmitResult:
    """One human/gpt exchange per pair; the human prompt is a seeded template choice.

    Records whose whitespace token count exceeds ``max_length`` are listed in
    ``over_length`` but still emitted.
    """
    templates = list(templates)
    if not templates:
        raise ParameterError("at least one prompt template is required")
    rng = SeededRng(seed)
    records, over = [], []
    for pair in pairs:
        if pair.pair_id not in texts:
            raise ConsistencyError(f"no annotation text for pair {pair.pair_id!r}")
        answer = texts[pair.pair_id]
        template = templates[rng.below(len(templates))]
        human = Turn("human", f"{template}\n{VIDEO_TOKEN}")
        rec = AnnotationRecord(id=pair.pair_id, video=pair.video, conversations=(human, Turn("gpt", answer)))
        problem = validate_record(rec)
        if problem:
            raise ConsistencyError(f"pair {pair.pair_id!r}: {problem}")
        if len(human.text.split()) + len(answer.split()) > max_length:
            over.append(rec.id)
        records.append(rec)
    if len({r.id for r in records}) != len(records):
        raise ConsistencyError("duplicate record ids")
    return EmitResult(records, over)


def serialize_records(records) -> str:
    return json.dumps([r.to_dict() for r in records], indent=2, ensure_ascii=False) + "\n"


def parse_records(text: str) -> list[AnnotationRecord]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"annotation file is not valid JSON (line {exc.lineno}: {exc.msg})") from exc
    if not isinstance(data, list):
        raise FormatError("annotation file must hold a JSON list of records")
    try:
        records = [AnnotationRecord.from_dict(d) for d in data]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed annotation record ({exc})") from exc
    if len({r.id for r in records}) != len(records):
        raise ConsistencyError("duplicate record ids")
    return records
