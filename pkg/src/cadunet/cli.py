"""Command-line front end: data synthesis, training, inference, reports.

Configuration comes from a preset or a JSON file; dedicated flags and
repeatable --set KEY=VALUE overrides win over file keys. Every command is
deterministic given its config and seed, exits 0 on success, and prints a
diagnostic naming the offending field otherwise.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (ConfigError, PRESETS, apply_override, from_dict,
                     paper_defaults, tiny_preset, to_json)
from .datasynth import ManifestDataset, load_entry, read_manifest, synth_corpus
from .evaluation import attention_snr_experiment, evaluate
from .network import Model, enhance, network_input, segment_samples
from .oracles import run_oracle_suite
from .stft import stft
from .training import TrainConfig, calibrate_alpha, forward_losses, train
from .wavio import read_wav, write_wav


def _build_parser():
    p = argparse.ArgumentParser(
        prog="cadunet",
        description="Multichannel speech enhancement via complex-spectrogram "
                    "masking with a channel-attention dense U-Net.")
    p.add_argument("--paper-defaults", action="store_true",
                   help="print the canonical full-scale config as JSON and exit")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--config", help="JSON run configuration")
        g.add_argument("--preset", choices=sorted(PRESETS),
                       default=None, help="built-in configuration (default: paper)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the run seed")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one dotted config key, e.g. train.lr=3e-4")

    sp = sub.add_parser("synth-data", help="write a synthetic corpus + manifest")
    common(sp)
    sp.add_argument("--out", help="corpus directory (default: data.root)")

    sp = sub.add_parser("train", help="train a model and emit checkpoints")
    common(sp)
    sp.add_argument("--data", help="corpus directory (default: data.root)")
    sp.add_argument("--out", required=True, help="run directory for logs/checkpoints")
    sp.add_argument("--steps", type=int, default=None, help="override train.steps")
    sp.add_argument("--checkpoint", help="resume from this checkpoint")
    sp.add_argument("--val-every", type=int, default=None,
                    help="override train.val_every")

    sp = sub.add_parser("enhance", help="split one WAV into speech and noise")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--in", dest="wav_in", required=True, help="mixture WAV")
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("evaluate", help="score a checkpoint on a manifest split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="corpus directory")
    sp.add_argument("--split", default="dev")
    sp.add_argument("--taps", type=int, default=8,
                    help="distortion-filter length for projection SDR")
    sp.add_argument("--out", required=True, help="report directory")

    sp = sub.add_parser("inspect-attention",
                        help="export input-attention maps for an utterance")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--in", dest="wav_in", help="mixture WAV to analyze")
    sp.add_argument("--data", help="corpus directory (with --utterance)")
    sp.add_argument("--utterance", help="manifest id, e.g. utt_0003")
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gradcheck",
                        help="verify gradients against finite differences")
    common(sp)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--entries", type=int, default=40,
                    help="finite-difference probes per parameter")
    sp.add_argument("--extended", action="store_true",
                    help="also run the independent oracle suite")
    return p


def _resolve_config(args):
    if args.config:
        payload = json.loads(Path(args.config).read_text())
        if not isinstance(payload, dict):
            raise ConfigError(f"config {args.config} must be a JSON object")
    elif args.preset:
        payload = json.loads(to_json(PRESETS[args.preset]()))
    else:
        payload = json.loads(to_json(paper_defaults()))
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        apply_override(payload, key, value)
    if args.seed is not None:
        payload["seed"] = args.seed
    steps = getattr(args, "steps", None)
    if steps is not None:
        apply_override(payload, "train.steps", str(steps))
    val_every = getattr(args, "val_every", None)
    if val_every is not None:
        apply_override(payload, "train.val_every", str(val_every))
    return from_dict(payload)


def _cmd_synth_data(args):
    cfg = _resolve_config(args)
    out = args.out or cfg.data.root
    manifest = synth_corpus(out, counts=cfg.data.counts,
                            duration_s=cfg.data.duration_s,
                            channels=cfg.data.channels, seed=cfg.seed,
                            snr_range=cfg.data.snr_range_db)
    entries = read_manifest(manifest)
    per_split = {}
    for e in entries:
        per_split[e["split"]] = per_split.get(e["split"], 0) + 1
    print(f"wrote {len(entries)} utterances under {out}")
    for split in sorted(per_split):
        print(f"  {split}: {per_split[split]}")
    print(f"manifest: {manifest}")
    return 0


def _train_config(cfg):
    t = cfg.train
    return TrainConfig(steps=t.steps, batch_size=t.batch_size, lr=t.lr,
                       beta1=t.beta1, beta2=t.beta2, eps=t.eps, seed=cfg.seed,
                       alpha=t.alpha, gain_db_range=t.gain_db_range,
                       log_every=t.log_every, val_every=t.val_every,
                       checkpoint_every=t.checkpoint_every)


def _cmd_train(args):
    from .report import training_figures
    cfg = _resolve_config(args)
    data_dir = Path(args.data or cfg.data.root)
    manifest = data_dir / "manifest.jsonl"
    if not manifest.exists():
        print(f"error: no manifest at {manifest}; run synth-data first",
              file=sys.stderr)
        return 2
    train_set = ManifestDataset(manifest, "train")
    try:
        val_set = ManifestDataset(manifest, "dev")
    except ValueError:
        val_set = None

    state = None
    if args.checkpoint:
        model, state = load_checkpoint(args.checkpoint)
        if state is None:
            raise CheckpointError(
                f"{args.checkpoint} has no optimizer state to resume from")
        print(f"resuming from {args.checkpoint} at step {state.adam.step}")
    else:
        model = Model(cfg.network, cfg.codec, seed=cfg.seed)
    tc = _train_config(cfg)

    t0 = time.monotonic()
    history, state, final = train(model, train_set, tc, val_samples=val_set,
                                  state=state, out_dir=args.out)
    wall = time.monotonic() - t0
    if history:
        print(f"trained to step {state.adam.step} in {wall:.0f}s, "
              f"final loss {history[-1]['loss']:.4f}")
    else:
        print(f"nothing to do: checkpoint already at step {state.adam.step}")
    print(f"final checkpoint: {final}")
    for fig in training_figures(Path(args.out) / "metrics.csv", args.out):
        print(f"figure: {fig}")
    return 0


def _cmd_enhance(args):
    model, _ = load_checkpoint(args.checkpoint)
    y, rate = read_wav(args.wav_in)
    if y.ndim != 2 or y.shape[1] != model.cfg.channels:
        got = y.shape[1] if y.ndim == 2 else 1
        print(f"error: checkpoint expects {model.cfg.channels} channels, "
              f"{args.wav_in} has {got}", file=sys.stderr)
        return 2
    s_hat, n_hat = enhance(model, y)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.wav_in).stem
    speech_path = out / f"{stem}_speech.wav"
    noise_path = out / f"{stem}_noise.wav"
    write_wav(speech_path, s_hat, rate)
    write_wav(noise_path, n_hat, rate)
    resid = float(np.linalg.norm(s_hat + n_hat - y) / max(np.linalg.norm(y), 1e-300))
    print(f"wrote {speech_path}")
    print(f"wrote {noise_path}")
    print(f"speech + noise vs input: relative L2 {resid:.3e}")
    return 0


def _cmd_evaluate(args):
    from .report import evaluation_figures
    model, _ = load_checkpoint(args.checkpoint)
    manifest = Path(args.data) / "manifest.jsonl"
    if not manifest.exists():
        print(f"error: no manifest at {manifest}", file=sys.stderr)
        return 2
    report = evaluate(model, manifest, args.split, projection_taps=args.taps)
    if not report.rows:
        print(f"error: split {args.split!r} produced no scored utterances",
              file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"eval_{args.split}.csv"
    report.to_csv(csv_path)
    summary = report.summary()
    (out / f"eval_{args.split}_summary.txt").write_text(summary + "\n")
    print(summary)
    print(f"report: {csv_path}")
    for fig in evaluation_figures(report, out, prefix=f"eval_{args.split}"):
        print(f"figure: {fig}")
    return 0


def _cmd_inspect_attention(args):
    from .attention import attention_to_csv, export_attention
    from .report import attention_band_figure, attention_figure
    model, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.wav_in and (args.data or args.utterance):
        print("error: use either --in or --data/--utterance, not both",
              file=sys.stderr)
        return 2
    if args.wav_in:
        y, _ = read_wav(args.wav_in)
        seg = segment_samples(model)
        if y.shape[0] < seg:
            print(f"error: {args.wav_in} is shorter than one segment "
                  f"({seg} samples)", file=sys.stderr)
            return 2
        spec = stft(y[:seg], model.codec)
        with ad.no_grad():
            x = network_input(model, spec)
            amap = export_attention(x, model.input_ca, model.cfg.variant,
                                    block="input_ca")
        summary_rows = None
    elif args.data and args.utterance:
        manifest = Path(args.data) / "manifest.jsonl"
        entries = [e for e in read_manifest(manifest) if e["id"] == args.utterance]
        if not entries:
            print(f"error: utterance {args.utterance!r} not in {manifest}",
                  file=sys.stderr)
            return 2
        sample = load_entry(entries[0], manifest.parent)
        result = attention_snr_experiment(model, sample)
        amap = result["attention"]
        summary_rows = result
    else:
        print("error: inspect-attention needs --in WAV or --data DIR with "
              "--utterance ID", file=sys.stderr)
        return 2

    csv_path = out / "attention.csv"
    attention_to_csv(amap, csv_path)
    print(f"attention map: {csv_path}")
    figs = [attention_figure(amap, out / "attention_mean.png")]
    if summary_rows is not None:
        figs.append(attention_band_figure(summary_rows["band_rows"],
                                          out / "attention_bands.png"))
        pc = summary_rows["per_channel_mean"]
        print("per-channel mean attention magnitude: "
              + ", ".join(f"ch{c} {v:.4f}" for c, v in enumerate(pc)))
        print(f"argmax channel: {summary_rows['argmax_channel']}")
        print("per-channel truth SNR (dB): "
              + ", ".join(f"{v:+.2f}" for v in summary_rows["posterior_snr_db"]))
    for fig in figs:
        print(f"figure: {fig}")
    return 0


def _cmd_gradcheck(args):
    from .datasynth import MixtureSample, synth_sample
    cfg = _resolve_config(args)
    model = Model(cfg.network, cfg.codec, seed=cfg.seed)
    # Lift weights off their small init so no gradient sits at the
    # finite-difference noise floor; the adjoints under test are unchanged.
    for p in model.parameters():
        if p.name.endswith("weight"):
            p.data *= 3.0
    seg = segment_samples(model)
    base = synth_sample(123, duration_s=(seg + 160) / 16000.0,
                        channels=cfg.network.channels)
    sample = MixtureSample(speech=base.speech[:seg], noise=base.noise[:seg],
                           mixture=base.speech[:seg] + base.noise[:seg])
    alpha = calibrate_alpha([sample], model)

    def loss_fn():
        tt, mt = forward_losses(model, sample.speech, sample.noise,
                                sample.mixture)
        return ad.add(ad.mul(tt, alpha), mt)

    t0 = time.monotonic()
    report = {}
    err = ad.grad_check(loss_fn, model.parameters(), eps=1e-6,
                        max_entries=args.entries, sample_seed=7, report=report)
    wall = time.monotonic() - t0
    ok = err < args.tolerance
    print(f"gradcheck: {model.parameter_count()} parameters, "
          f"{args.entries} probes each, {wall:.0f}s")
    print(f"max relative error {err:.3e} vs tolerance {args.tolerance:g}: "
          f"{'PASS' if ok else 'FAIL'}")
    if not ok:
        for name, e in sorted(report.items(), key=lambda kv: -kv[1])[:5]:
            print(f"  worst: {name} {e:.3e}", file=sys.stderr)
    if args.extended:
        results = run_oracle_suite("all")
        failed = [r for r in results if not r.passed]
        for r in results:
            print(f"oracle {r.name}: max err {r.max_err:.3e} "
                  f"(tol {r.tol:g}) {'PASS' if r.passed else 'FAIL'}")
        ok = ok and not failed
    return 0 if ok else 1


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "enhance": _cmd_enhance,
    "evaluate": _cmd_evaluate,
    "inspect-attention": _cmd_inspect_attention,
    "gradcheck": _cmd_gradcheck,
}


def run(argv):
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.paper_defaults:
        print(to_json(paper_defaults()), end="")
        return 0
    if not args.command:
        parser.print_help()
        return 2
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
