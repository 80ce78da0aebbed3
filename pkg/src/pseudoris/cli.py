"""Command-line entry point: ``pseudoris <command> [flags]``.

Exit codes: 0 success, 1 partial failure (skipped images or candidates),
2 configuration / usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .backends import KINDS, default_registry
from .errors import BackendLookupError, ConfigurationError, CorruptDataError, UsageError
from .formats import (annotation_document, digest, dumps, effective_settings, manifest_document,
                      parse_config_text, pipeline_config, read_annotations, sha256_file,
                      write_atomic)
from .maskops import rle_decode
from .pipeline import Backends, compute_stats, directory_source, refilter, run_pipeline
from .scoring import METRICS, FilterConfig

log = logging.getLogger("pseudoris")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


class CLIError(Exception):
    """Raised inside commands to exit with a diagnostic and a code."""

    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def cmd_generate(args) -> int:
    images = Path(args.images)
    if not images.is_dir():
        raise CLIError(f"image directory not found: {images}")
    if args.masks and not Path(args.masks).is_dir():
        raise CLIError(f"mask directory not found: {args.masks}")
    file_settings = {}
    if args.config:
        try:
            file_settings = parse_config_text(Path(args.config).read_text())
        except OSError as e:
            raise CLIError(f"cannot read config: {e}") from None
    flags = {
        "seed": args.seed, "workers": args.workers, "filter.tau": args.tau,
        "filter.metric": args.metric, "decoding.temperature": args.temperature,
        "decoding.family": args.family, "decoding.calibration_mode": args.calibration_mode,
        "backends.captioner": args.backend_captioner, "backends.scorer": args.backend_scorer,
        "backends.mask_extractor": args.backend_masks,
        "backends.coarse_mask_extractor": args.backend_coarse_masks,
    }
    settings = effective_settings(file_settings, flags)
    config = pipeline_config(settings)
    backends = Backends.from_config(config)
    config_digest = digest(settings)

    source = directory_source(images, Path(args.masks) if args.masks else None)
    annotations, stats = run_pipeline(source, backends, config)

    out = Path(args.out)
    outputs = {}
    doc = dumps(annotation_document(annotations, config_digest))
    write_atomic(out, doc)
    outputs[out.name] = sha256_file(out)
    stats_path = Path(args.stats) if args.stats else _sibling(out, ".stats.json")
    write_atomic(stats_path, dumps(stats.to_dict()))
    outputs[stats_path.name] = sha256_file(stats_path)
    if args.candidates:
        cpath = Path(args.candidates)
        write_atomic(cpath, dumps(annotation_document(annotations, config_digest, True)))
        outputs[cpath.name] = sha256_file(cpath)

    inputs = {r.file_name: sha256_file(images / r.file_name) for r in source}
    if args.masks:
        for p in sorted(Path(args.masks).glob("*.json")):
            inputs[f"masks/{p.name}"] = sha256_file(p)
    if args.config:
        inputs[f"config/{Path(args.config).name}"] = sha256_file(Path(args.config))
    manifest_path = Path(args.manifest) if args.manifest else _sibling(out, ".manifest.json")
    created = datetime.now(timezone.utc).isoformat(timespec="seconds")
    write_atomic(manifest_path, dumps(manifest_document(settings, config_digest, inputs,
                                                        outputs, created)))
    _print_stats(stats.to_dict())
    if stats.n_skipped_images or stats.n_failed_candidates:
        return EXIT_PARTIAL
    return EXIT_OK


def _read(path: str, require_candidates: bool = False):
    try:
        return read_annotations(Path(path), require_candidates)
    except CorruptDataError as e:
        raise CLIError(str(e)) from None


def cmd_filter(args) -> int:
    dump = _read(args.candidates, require_candidates=True)
    filt = FilterConfig(args.metric, args.tau)
    kept = refilter(dump.annotations, filt)
    write_atomic(Path(args.out), dumps(annotation_document(kept, dump.config_digest)))
    n_kept = sum(len(a.captions) for a in kept)
    n_total = sum(len(a.candidates) for a in kept)
    print(f"metric={filt.metric} tau={filt.tau:g} kept={n_kept} of {n_total}")
    return EXIT_OK


def _print_stats(d: dict) -> None:
    for k in sorted(d):
        print(f"{k}: {d[k]}")


def cmd_stats(args) -> int:
    ann = _read(args.annotations)
    stats = compute_stats(ann.annotations).to_dict()
    if args.json:
        sys.stdout.write(dumps(stats))
    else:
        _print_stats(stats)
    return EXIT_OK


def cmd_inspect(args) -> int:
    ann = _read(args.annotations)
    records = [a for a in ann.annotations if a.image_id == args.image_id]
    if not records:
        raise CLIError(f"image id {args.image_id!r} not in {args.annotations}")
    for a in records:
        mask = rle_decode(a.mask)
        x0, y0, x1, y1 = mask.bbox if mask.area else (0, 0, -1, -1)
        flag = "  [no captions kept]" if a.flagged else ""
        print(f"{a.image_id} mask {a.mask_index}: area={mask.area} "
              f"bbox=({x0},{y0})-({x1},{y1}) candidates={a.n_candidates}{flag}")
        for c in a.captions:
            crop = f"{c.crop_spec.margin:.1f}{'m' if c.crop_spec.masked else ''}"
            print(f"  uos={c.uos:8.4f} cos={c.cos:8.4f} dos={c.dos:8.4f} "
                  f"crop={crop:<4} dec={c.decoding_config_index:<2} {c.text}")
    return EXIT_OK


def cmd_synth_bench(args) -> int:
    from .synthworld import CorpusConfig, benchmark

    cfg = CorpusConfig(n_scenes=args.scenes, n_objects=args.objects, overlap=args.overlap,
                       seed=args.seed, temperature=args.temperature, tau=args.tau,
                       calibration_mode=args.calibration_mode)
    report = benchmark(cfg)
    sys.stdout.write(report.to_text())
    if args.out:
        write_atomic(Path(args.out), dumps(report.to_dict()))
    return EXIT_OK


def cmd_synth_corpus(args) -> int:
    from PIL import Image as PILImage

    from .formats import normalize
    from .maskops import rle_encode
    from .synthworld import CorpusConfig, make_corpus

    cfg = CorpusConfig(n_scenes=args.scenes, n_objects=args.objects, overlap=args.overlap,
                       seed=args.seed, width=args.width, height=args.height)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = make_corpus(cfg)
    for s in scenes:
        PILImage.fromarray(s.render().pixels).save(out / f"{s.id}.png")
        if args.masks:
            records = [rle_encode(s.object_mask(o.id)).to_dict() for o in s.objects]
            write_atomic(Path(args.masks) / f"{s.id}.json", dumps(records))
    write_atomic(out / "scenes.json", dumps(normalize([s.to_dict() for s in scenes])))
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_backends(args) -> int:
    for kind in KINDS:
        print(f"{kind}: {', '.join(default_registry.names(kind))}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pseudoris", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate pseudo annotations for a directory of images")
    g.add_argument("--images", required=True)
    g.add_argument("--masks", help="directory of <image stem>.json RLE mask lists")
    g.add_argument("--config", help="flat key = value config file")
    g.add_argument("--out", required=True)
    g.add_argument("--stats")
    g.add_argument("--manifest")
    g.add_argument("--candidates", help="also write every scored candidate here")
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--tau", type=float)
    g.add_argument("--metric", choices=METRICS)
    g.add_argument("--temperature", type=float)
    g.add_argument("--family", choices=("distinctive", "naive"))
    g.add_argument("--calibration-mode", choices=("average", "weighted"))
    g.add_argument("--backend-captioner")
    g.add_argument("--backend-scorer")
    g.add_argument("--backend-masks")
    g.add_argument("--backend-coarse-masks")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("filter", help="re-filter a candidate dump at a new threshold")
    f.add_argument("--candidates", required=True)
    f.add_argument("--tau", type=float, default=1.3)
    f.add_argument("--metric", choices=METRICS, default="distinctiveness")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_filter)

    s = sub.add_parser("stats", help="corpus statistics of an annotation file")
    s.add_argument("--annotations", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_stats)

    i = sub.add_parser("inspect", help="print one image's masks, captions and scores")
    i.add_argument("--annotations", required=True)
    i.add_argument("--image-id", required=True)
    i.set_defaults(func=cmd_inspect)

    from .synthworld import SYNTH_TEMPERATURE

    b = sub.add_parser("synth-bench", help="ablation benchmark on synthetic scenes")
    b.add_argument("--scenes", type=int, default=200)
    b.add_argument("--objects", type=int, default=4)
    b.add_argument("--overlap", type=float, default=1.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--temperature", type=float, default=SYNTH_TEMPERATURE)
    b.add_argument("--tau", type=float, default=1.3)
    b.add_argument("--calibration-mode", choices=("average", "weighted"), default="average")
    b.add_argument("--out", help="machine-readable report (JSON)")
    b.set_defaults(func=cmd_synth_bench)

    c = sub.add_parser("synth-corpus", help="write synthetic scene images to a directory")
    c.add_argument("--out", required=True)
    c.add_argument("--masks", help="also write exact object masks here")
    c.add_argument("--scenes", type=int, default=10)
    c.add_argument("--objects", type=int, default=4)
    c.add_argument("--overlap", type=float, default=1.0)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--width", type=int, default=96)
    c.add_argument("--height", type=int, default=96)
    c.set_defaults(func=cmd_synth_corpus)

    k = sub.add_parser("backends", help="list registered backends")
    k.set_defaults(func=cmd_backends)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse usage errors exit 2 already
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ConfigurationError, BackendLookupError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
