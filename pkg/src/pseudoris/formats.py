"""Config files, annotation / candidate files and run manifests.

Every file is written with sorted keys, floats rounded to 6 decimals,
infinities as the string ``"inf"`` and a trailing newline so identical runs
produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from . import __version__
from .backends import TokenSequence
from .decoding import CALIBRATION_MODES, DEFAULT_TOPK, DEFAULT_TOPP, default_grid
from .errors import ConfigurationError, CorruptDataError
from .maskops import RLE, CropSpec
from .pipeline import PipelineConfig, PseudoAnnotation
from .scoring import DEFAULT_TAU, METRICS, CaptionCandidate, FilterConfig

FORMAT_VERSION = 1
SEED_ENV = "PSEUDORIS_SEED"


def _list(cast):
    def parse(text: str):
        items = [t.strip() for t in str(text).split(",") if t.strip()]
        return [cast(t) for t in items]
    return parse


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_str(text: str):
    v = str(text).strip()
    return v if v and v.lower() != "none" else None


# key -> (parser, default)
SETTINGS: dict[str, tuple[Any, Any]] = {
    "seed": (int, 0),
    "workers": (int, 1),
    "filter.metric": (str, "distinctiveness"),
    "filter.tau": (float, DEFAULT_TAU),
    "decoding.family": (str, "distinctive"),
    "decoding.beam_width": (int, 5),
    "decoding.topk": (_list(int), list(DEFAULT_TOPK)),
    "decoding.topp": (_list(float), list(DEFAULT_TOPP)),
    "decoding.temperature": (float, 1.0),
    "decoding.max_len": (int, 32),
    "decoding.calibration_mode": (str, "average"),
    "crops.margins": (_list(float), [0.0, 0.1, 0.2]),
    "crops.masked": (_bool, True),
    "backends.captioner": (str, "synth"),
    "backends.scorer": (str, "synth"),
    "backends.mask_extractor": (_opt_str, "synth"),
    "backends.coarse_mask_extractor": (_opt_str, None),
}


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = parse_setting(key, value)
    return out


def parse_setting(key: str, value: Any) -> Any:
    if key not in SETTINGS:
        raise ConfigurationError(f"unknown setting {key!r}")
    parser = SETTINGS[key][0]
    try:
        return parser(value) if isinstance(value, str) else value
    except ValueError as e:
        raise ConfigurationError(f"bad value for {key}: {e}") from None


def effective_settings(file_settings: dict | None = None, flag_settings: dict | None = None,
                       env: dict | None = None) -> dict[str, Any]:
    """Defaults < PSEUDORIS_SEED (seed only) < config file < flags."""
    env = os.environ if env is None else env
    out = {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in SETTINGS.items()}
    if env.get(SEED_ENV):
        out["seed"] = parse_setting("seed", env[SEED_ENV])
    out.update(file_settings or {})
    out.update({k: v for k, v in (flag_settings or {}).items() if v is not None})
    return out


def pipeline_config(settings: dict[str, Any]) -> PipelineConfig:
    s = settings
    if s["filter.metric"] not in METRICS:
        raise ConfigurationError(f"filter.metric must be one of {METRICS}")
    if s["decoding.calibration_mode"] not in CALIBRATION_MODES:
        raise ConfigurationError(f"decoding.calibration_mode must be one of {CALIBRATION_MODES}")
    try:
        crops = [CropSpec(m, False) for m in s["crops.margins"]]
        if s["crops.masked"]:
            crops.append(CropSpec(0.0, True))
        grid = default_grid(s["decoding.family"], beam_width=s["decoding.beam_width"],
                            ks=s["decoding.topk"], ps=s["decoding.topp"],
                            temperature=s["decoding.temperature"], max_len=s["decoding.max_len"],
                            calibration_mode=s["decoding.calibration_mode"])
        return PipelineConfig(
            crop_specs=tuple(crops), decoding_configs=tuple(grid),
            filter=FilterConfig(s["filter.metric"], s["filter.tau"]), seed=s["seed"],
            captioner=s["backends.captioner"], scorer=s["backends.scorer"],
            mask_extractor=s["backends.mask_extractor"],
            coarse_mask_extractor=s["backends.coarse_mask_extractor"], workers=s["workers"])
    except ValueError as e:  # UsageError from the config dataclasses
        raise ConfigurationError(str(e)) from None


def _num(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return round(float(x), 6)


def _parse_num(x) -> float:
    if isinstance(x, str):
        if x in ("inf", "-inf"):
            return float(x)
        raise CorruptDataError(f"bad numeric value {x!r}")
    return float(x)


def normalize(obj):
    """Recursively apply the float rules used in every output file."""
    if isinstance(obj, float):
        return _num(obj)
    if isinstance(obj, dict):
        return {k: normalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [normalize(v) for v in obj]
    return obj


def dumps(obj) -> str:
    return json.dumps(normalize(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(normalize(obj), sort_keys=True).encode()).hexdigest()


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _caption_record(c: CaptionCandidate, raw: bool) -> dict:
    rec = {"text": c.text, "uos": c.uos, "cos": c.cos, "dos": c.dos,
           "crop": {"margin": c.crop_spec.margin, "masked": c.crop_spec.masked},
           "decoder": c.decoding_config_index}
    if raw:
        rec.update(theta_target=c.theta_target, theta_others=list(c.theta_others),
                   cos_others=list(c.cos_others))
    return rec


def annotation_document(annotations: Iterable[PseudoAnnotation], config_digest: str,
                        include_candidates: bool = False) -> dict:
    records = []
    for a in annotations:
        rec = {"image_id": a.image_id, "file_name": a.file_name, "mask_index": a.mask_index,
               "mask": a.mask.to_dict(), "flagged": a.flagged,
               "n_candidates": a.n_candidates,
               "captions": [_caption_record(c, False) for c in a.captions]}
        if include_candidates:
            rec["candidates"] = [_caption_record(c, True) for c in a.candidates]
        records.append(rec)
    kind = "candidates" if include_candidates else "annotations"
    return {"version": FORMAT_VERSION, "kind": kind, "config_digest": config_digest,
            "annotations": records}


def _candidate_from_record(rec: dict, mask_index: int) -> CaptionCandidate:
    try:
        crop = rec["crop"]
        c = CaptionCandidate(
            mask_id=mask_index, text=rec["text"], tokens=TokenSequence((), False),
            crop_spec=CropSpec(float(crop["margin"]), bool(crop["masked"])),
            decoding_config_index=int(rec["decoder"]))
        for name in ("uos", "cos", "dos"):
            if rec.get(name) is None:
                raise CorruptDataError(f"caption {rec['text']!r} has no {name} score")
            setattr(c, name, _parse_num(rec[name]))
    except (KeyError, TypeError) as e:
        raise CorruptDataError(f"malformed caption record: {e}") from None
    if "theta_target" in rec:
        c.theta_target = _parse_num(rec["theta_target"])
        c.theta_others = [_parse_num(v) for v in rec.get("theta_others", [])]
        c.cos_target = c.cos
        c.cos_others = [_parse_num(v) for v in rec.get("cos_others", [])]
    return c


@dataclass
class AnnotationFile:
    config_digest: str
    kind: str
    annotations: list[PseudoAnnotation]


def read_annotations(path: Path, require_candidates: bool = False) -> AnnotationFile:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptDataError(f"cannot read {path}: {e}") from None
    if not isinstance(doc, dict) or "annotations" not in doc:
        raise CorruptDataError(f"{path} is not an annotation file")
    anns = []
    for rec in doc["annotations"]:
        try:
            idx = int(rec["mask_index"])
            mask = RLE.from_dict(rec["mask"])
            image_id, file_name = rec["image_id"], rec.get("file_name", rec["image_id"])
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptDataError(f"malformed annotation record: {e}") from None
        if require_candidates and "candidates" not in rec:
            raise CorruptDataError(f"{path} carries no candidate list; rerun generate "
                                   "with --candidates")
        captions = [_candidate_from_record(c, idx) for c in rec.get("captions", [])]
        cands = [_candidate_from_record(c, idx) for c in rec.get("candidates", [])]
        anns.append(PseudoAnnotation(image_id, file_name, idx, mask, captions, cands,
                                     int(rec.get("n_candidates", len(cands)))))
    return AnnotationFile(doc.get("config_digest", ""), doc.get("kind", "annotations"), anns)


def manifest_document(settings: dict, config_digest: str, inputs: dict[str, str],
                      outputs: dict[str, str], created_at: str) -> dict:
    return {"tool_version": __version__, "config": settings, "config_digest": config_digest,
            "seed": settings.get("seed"), "inputs": inputs, "outputs": outputs,
            "created_at": created_at}
