"""Command-line entry point: ``midi2drum <command> [flags]``.

Exit codes: 0 success, 1 bad input (one JSON line on stderr), 2 failed
verification such as split leakage (violations on stdout).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


class CliError(Exception):
    pass


class VerificationFailed(Exception):
    def __init__(self, violations):
        super().__init__(f"{len(violations)} violation(s)")
        self.violations = violations


def _set_threads(n: int | None) -> None:
    # only effective before numpy loads its BLAS
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file {path} does not exist")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise CliError(f"config file {path} must hold a JSON object")
    return obj


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} {path} does not exist")
    return p


def _write_json(path: str | None, obj) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# Commands


def cmd_make_kits(args) -> None:
    from .synth_oracle import make_kit, save_kits

    if args.n < 1:
        raise CliError("--n must be >= 1")
    import numpy as np

    seeds = np.random.SeedSequence(args.seed).generate_state(args.n)
    kits = [make_kit(f"kit{i:02d}", int(s)) for i, s in enumerate(seeds)]
    save_kits(args.out, kits)
    print(json.dumps({"kits": [k.kit_id for k in kits], "out": args.out}))


def cmd_binarize(args) -> None:
    from .midi_core import RESOLUTIONS, MidiParseError, TempoMap, binarize_counted, grid_to_json, parse_smf

    src = _need_file(args.input, "MIDI file")
    if args.resolution not in RESOLUTIONS:
        raise CliError(f"--resolution must be one of {RESOLUTIONS}")
    try:
        parsed = parse_smf(src.read_bytes(), channel=args.channel)
    except MidiParseError as exc:
        raise CliError(f"{src}: {exc}") from exc
    tempo = TempoMap(args.bpm) if args.bpm else parsed.tempo
    result = binarize_counted(parsed.events, tempo, args.resolution, args.bars)
    text = grid_to_json(result.grid)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")
    print(json.dumps({"steps": result.grid.n_steps, "dropped": result.dropped, "unmapped": parsed.unmapped}),
          file=sys.stderr)


def cmd_build_dataset(args) -> None:
    from .dataset import (
        Manifest,
        SplitPolicy,
        ToyCorpus,
        TrackRecord,
        build_pairs,
        build_toy_corpus,
        read_manifest,
        segment_two_bars,
        verify_splits,
        write_manifest,
    )
    from .midi_core import RESOLUTIONS, MidiParseError, binarize, parse_smf
    from .synth_oracle import load_kits

    out = Path(args.out)
    if args.manifest:
        manifest = read_manifest(_need_file(args.manifest, "manifest"))
        violations = verify_splits(manifest.pairs, manifest.records)
        if violations:
            raise VerificationFailed(violations)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / "manifest.jsonl", manifest)
        if args.kits:
            ToyCorpus(load_kits(_need_file(args.kits, "kit file")), manifest).save(out)
        print(json.dumps({"pairs": len(manifest.pairs), "violations": 0}))
        return

    if args.toy or not args.midi_dir:
        corpus = build_toy_corpus(n_kits=args.n_kits, n_patterns=args.n_patterns, seed=args.seed,
                                  kit_split=tuple(args.kit_split), midi_split=tuple(args.midi_split))
    else:
        midi_dir = Path(args.midi_dir)
        if not midi_dir.is_dir():
            raise CliError(f"--midi-dir {midi_dir} is not a directory")
        if not args.kits:
            raise CliError("--midi-dir needs --kits")
        kits = load_kits(_need_file(args.kits, "kit file"))
        windows, rejected = [], []
        for path in sorted(midi_dir.glob("*.mid")):
            try:
                parsed = parse_smf(path.read_bytes())
            except MidiParseError as exc:
                rejected.append({"file": path.name, "reason": str(exc)})
                continue
            seg = segment_two_bars(parsed.events, parsed.tempo, parsed.length_seconds)
            rejected += [{"file": path.name, "window": w, "reason": r} for w, r in seg.rejected]
            style = "Fill" if "fill" in path.stem.lower() else "Beat"
            windows += [(path.stem, i, style, parsed.tempo.bpm, ev) for i, ev in enumerate(seg.windows)]
        if not windows:
            raise CliError(f"no usable 2-bar windows in {midi_dir}")
        parents = sorted({w[0] for w in windows})
        policy = SplitPolicy.random([k.kit_id for k in kits], parents, seed=args.seed, mode="enumerate")
        records = [
            TrackRecord(f"{stem}_w{i:03d}", kit.kit_id, style, bpm,
                        {r: binarize(ev, bpm, r, 2) for r in RESOLUTIONS}, {"midi_file": stem},
                        tuple(ev), parent_midi_id=stem)
            for stem, i, style, bpm, ev in windows
            for kit in kits
            if policy.split_for(kit.kit_id, stem) is not None
        ]
        pairing = build_pairs(records, policy)
        header = {"corpus": "midi", "seed": args.seed, "rejected_windows": rejected,
                  "unpaired": [list(u) for u in pairing.unpaired]}
        corpus = ToyCorpus(kits, Manifest(header, records, pairing.pairs, SplitPolicy(policy.kits, policy.midis)))
    violations = verify_splits(corpus.manifest.pairs, corpus.manifest.records)
    if violations:
        raise VerificationFailed(violations)
    corpus.save(out)
    counts = {s: len(corpus.manifest.split_pairs(s)) for s in ("train", "validation", "test")}
    print(json.dumps({"out": str(out), "records": len(corpus.records), "pairs": counts}))


def _train_config(args, base: dict):
    from .trainer import TOY_CONFIG, TrainConfig

    obj = TOY_CONFIG.to_dict() if args.toy else TrainConfig().to_dict()
    obj.update(base)
    for key in ("epochs", "lr", "batch_size", "resolution", "seed", "cfg_dropout", "dtype"):
        val = getattr(args, key, None)
        if val is not None:
            obj[key] = val
    try:
        return TrainConfig.from_dict(obj)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad training config: {exc}") from exc


def _load_data(path: str):
    from .dataset import ToyCorpus

    d = Path(path)
    if not (d / "manifest.jsonl").is_file() or not (d / "kits.json").is_file():
        raise CliError(f"{path} is not a dataset directory (needs manifest.jsonl and kits.json)")
    return ToyCorpus.load(d)


def cmd_train(args, config: dict) -> None:
    from .trainer import LatentSource, train_loop

    cfg = _train_config(args, config.get("train", {}))
    corpus = _load_data(args.data)
    source = LatentSource.from_corpus(corpus)
    try:
        result = train_loop(source, cfg, args.out, resume=args.resume,
                            on_epoch=lambda r: print(json.dumps(r, sort_keys=True), flush=True))
    except ValueError as exc:
        if "split verification" in str(exc):
            raise VerificationFailed([str(exc)]) from exc
        raise CliError(str(exc)) from exc
    print(json.dumps({"checkpoint": str(result.checkpoint), "initial_val_loss": result.initial_val_loss,
                      "final_val_loss": result.final_val_loss}))


def _sample_config(args, base: dict):
    from .evaluate import SampleConfig

    obj = {**SampleConfig().__dict__, **base}
    for key in ("steps", "guidance_scale", "sampler"):
        val = getattr(args, key, None)
        if val is not None:
            obj[key] = val
    if args.seed is not None:
        obj["seed"] = args.seed
    return SampleConfig(**obj)


def cmd_sample(args, config: dict) -> None:
    import numpy as np

    from .dataset import PairRecord
    from .evaluate import generate, held_out_pairs
    from .midi_core import Projection, project_grid
    from .synth_oracle import render_grid, write_wav
    from .trainer import LatentSource, load_model

    model, meta = load_model(_need_file(args.checkpoint, "checkpoint"))
    corpus = _load_data(args.data)
    source = LatentSource.from_corpus(corpus)
    cfg = _sample_config(args, config.get("sample", {}))
    res = int(meta["train_config"]["resolution"])
    if args.target:
        keys = {r.key for r in corpus.records}
        for k in (args.target, args.reference):
            if k not in keys:
                raise CliError(f"unknown record {k}")
        pairs = [PairRecord(args.target, args.reference, corpus.manifest.record(args.target).kit_id, "test")]
    else:
        pairs = held_out_pairs(source, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    latents = {}
    for i, p in enumerate(pairs):
        it = source.item(p, res)
        latents[p.target] = generate(model, it.target, it.reference, it.x_ref, cfg, seed=cfg.seed + i)
        if args.preview:
            rec = corpus.manifest.record(p.target)
            grid = project_grid(it.target, Projection.ARRANGEMENT)
            write_wav(out / f"{rec.midi_id}_{rec.kit_id}_preview.wav", render_grid(grid, corpus.kit(rec.kit_id)))
    np.savez(out / "samples.npz", **latents)
    (out / "samples.json").write_text(json.dumps(
        {"pairs": [p.to_json() for p in pairs], "sample_config": cfg.__dict__, "resolution": res},
        indent=1, sort_keys=True) + "\n")
    print(json.dumps({"samples": len(latents), "out": str(out)}))


def cmd_evaluate(args, config: dict) -> None:
    from .evaluate import evaluate_model, random_baseline, summarize
    from .trainer import LatentSource, load_model

    corpus = _load_data(args.data)
    if args.baseline:
        rows = random_baseline(corpus, args.split, seed=args.seed or 0)
    else:
        if not args.checkpoint:
            raise CliError("evaluate needs --checkpoint or --baseline")
        model, meta = load_model(_need_file(args.checkpoint, "checkpoint"))
        cfg = _sample_config(args, config.get("sample", {}))
        rows = evaluate_model(model, LatentSource.from_corpus(corpus), int(meta["train_config"]["resolution"]),
                              cfg, args.split)
    _write_json(args.out, {"pairs": rows, "aggregate": summarize(rows)})


def cmd_ablate(args, config: dict) -> None:
    from .evaluate import ablate_resolution
    from .midi_core import RESOLUTIONS

    corpus = _load_data(args.data)
    cfg = _train_config(args, config.get("train", {}))
    for r in args.resolutions:
        if r not in RESOLUTIONS:
            raise CliError(f"resolution {r} not in {RESOLUTIONS}")
    summary = ablate_resolution(corpus, cfg, tuple(args.resolutions), _sample_config(args, config.get("sample", {})),
                                args.out)
    print(f"{'resolution':>10} {'f1':>7} {'rms_db':>7} {'cmlt':>7} {'amlt':>7}")
    for row in summary["rows"]:
        print(f"{row['resolution']:>10} {row['f1']:7.4f} {row['rms_error_db']:7.3f} {row['cmlt']:7.4f} {row['amlt']:7.4f}")


# --------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="midi2drum", description="MIDI-conditioned drum latent diffusion at desk scale.")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("--config", default=None, help="JSON config file with 'train' and 'sample' sections")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, default=None)
        return sp

    sp = common(sub.add_parser("make-kits", help="write synthetic kit parameters"))
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("binarize", help="SMF -> grid JSON")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--bpm", type=float, default=None, help="override the file's tempo")
    sp.add_argument("--resolution", type=int, default=64)
    sp.add_argument("--bars", type=int, default=2)
    sp.add_argument("--channel", type=int, default=None)
    sp.add_argument("--out", default=None)

    sp = common(sub.add_parser("build-dataset", help="segment, pair, verify and write a dataset directory"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--toy", action="store_true", help="synthetic corpus (default without --midi-dir)")
    sp.add_argument("--midi-dir", default=None)
    sp.add_argument("--kits", default=None)
    sp.add_argument("--manifest", default=None, help="verify and normalize an existing manifest")
    sp.add_argument("--n-kits", type=int, default=4)
    sp.add_argument("--n-patterns", type=int, default=64)
    sp.add_argument("--kit-split", type=int, nargs=3, default=[2, 1, 1])
    sp.add_argument("--midi-split", type=int, nargs=3, default=[48, 8, 8])

    def train_flags(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--toy", action="store_true", help="desk-scale training settings")
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--lr", type=float, default=None)
        sp.add_argument("--batch-size", type=int, default=None)
        sp.add_argument("--cfg-dropout", type=float, default=None)
        sp.add_argument("--dtype", choices=["float32", "float64"], default=None)

    def sample_flags(sp):
        sp.add_argument("--steps", type=int, default=None)
        sp.add_argument("--guidance-scale", type=float, default=None)
        sp.add_argument("--sampler", choices=["ddim", "dpmpp_2m"], default=None)

    sp = common(sub.add_parser("train", help="run the training loop"))
    train_flags(sp)
    sp.add_argument("--resolution", type=int, default=None)
    sp.add_argument("--resume", action="store_true")

    sp = common(sub.add_parser("sample", help="generate latents for pairs"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--target", default=None)
    sp.add_argument("--reference", default=None)
    sp.add_argument("--preview", action="store_true", help="also write oracle renders of the target grids")
    sample_flags(sp)

    sp = common(sub.add_parser("evaluate", help="score generated latents"))
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--baseline", choices=["random"], default=None)
    sp.add_argument("--out", default=None)
    sample_flags(sp)

    sp = common(sub.add_parser("ablate-resolution", help="train and score one model per grid resolution"))
    train_flags(sp)
    sp.add_argument("--resolutions", type=int, nargs="+", default=[16, 32, 64])
    sample_flags(sp)
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    _set_threads(args.threads)
    cmd = args.command
    try:
        config = _load_config(args.config)
        if cmd == "make-kits":
            if args.seed is None:
                args.seed = 0
            cmd_make_kits(args)
        elif cmd == "binarize":
            cmd_binarize(args)
        elif cmd == "build-dataset":
            if args.seed is None:
                args.seed = 0
            cmd_build_dataset(args)
        elif cmd == "train":
            cmd_train(args, config)
        elif cmd == "sample":
            if bool(args.target) != bool(args.reference):
                raise CliError("--target and --reference go together")
            cmd_sample(args, config)
        elif cmd == "evaluate":
            cmd_evaluate(args, config)
        elif cmd == "ablate-resolution":
            cmd_ablate(args, config)
    except VerificationFailed as exc:
        for v in exc.violations:
            print(json.dumps({"violation": v}))
        print(json.dumps({"error": "verification failed", "command": cmd, "violations": len(exc.violations)}),
              file=sys.stderr)
        return 2
    except (CliError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(json.dumps({"error": msg, "command": cmd, "type": type(exc).__name__}), file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
