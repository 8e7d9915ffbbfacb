"""Pipeline orchestration: composable subcommands over persisted artifacts.

Every stage reads and writes only documented file formats inside the
output directory, so stages are individually re-runnable.  All emitted
reports embed the configuration hash and master seed, and two runs with
the same config produce byte-identical files.

Config format: flat `section.key = value` lines; `#` starts a comment.
Repeatable key: `script.segment` (see synth.parse_script for the segment
syntax).  Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import convert as conv
from . import dse, features, mapping, metrics, nn, quant, sim, synth, trainer


class StageError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind  # missing-input | schema | config


DEFAULT_CONFIG = {
    "seed": "0",
    "synth.duration_s": "3600",
    "synth.rate_bpm": "31",
    "synth.interrogation_rate_hz": "28",
    "synth.noise_sigma_db": "0.05",
    "synth.distance_m": "0.3048",
    "synth.tx_power_w": "1.0",
    "synth.reader_gain": "6.0",
    "synth.tag_gain": "1.5",
    "synth.return_loss": "0.5",
    "synth.channel_count": "50",
    "synth.band_center_hz": "915e6",
    "synth.breath_amplitude_m": "0.005",
    "synth.gain_mod_frac": "0.05",
    "features.window_s": "1.0",
    "features.samples_per_window": "28",
    "features.test_fraction": "0.25",
    "model.conv_filters": "64",
    "model.kernel": "1",
    "model.hidden": "200,100",
    "model.dropout": "0.01",
    "train.learning_rate": "0.001",
    "train.batch_size": "5",
    "train.max_epochs": "100",
    "train.patience": "5",
    "train.val_fraction": "0.1",
    "tune.epochs": "10,20,30,40,50,60,70,80,90,100",
    "tune.learning_rates": "0.001,0.01,0.1,0.002,0.02,0.2,0.003,0.03,0.3",
    "quant.ks": "2,4,8,16,32,64",
    "quant.calibration_windows": "200",
    "convert.percentile": "99.9",
    "sim.timesteps": "12",
    "sim.v_th_mv": "0.5",
    "sim.thinning": "6",
    "sim.eval_windows": "200",
    "map.rows": "4",
    "map.cols": "4",
    "map.neuron_capacity": "256",
    "map.synapse_capacity": "65536",
    "explore.thresholds": "0.5,1,2,3,4,5,8",
    "explore.timesteps": "8,12,16",
    "explore.sample_sizes": "200",
}


class RunConfig:
    def __init__(self, values: dict, segments: list, text: str):
        self.values = values
        self.segments = segments
        self.sha256 = hashlib.sha256(text.encode()).hexdigest()
        self.seed = int(values["seed"])

    def get(self, key: str) -> str:
        return self.values[key]

    def get_float(self, key: str) -> float:
        return float(self.values[key])

    def get_int(self, key: str) -> int:
        return int(float(self.values[key]))

    def get_list(self, key: str, cast=float) -> list:
        return [cast(x) for x in self.values[key].split(",") if x.strip()]


def parse_config(text: str) -> RunConfig:
    values = dict(DEFAULT_CONFIG)
    segments = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise StageError("config", f"line {lineno}: expected 'key = value'")
        key, value = key.strip(), value.strip()
        if key == "script.segment":
            segments.append(value)
        elif key in values:
            values[key] = value
        else:
            raise StageError("config", f"line {lineno}: unknown key {key!r}")
    return RunConfig(values, segments, text)


def load_config(path, seed_override=None) -> RunConfig:
    if path:
        p = Path(path)
        if not p.exists():
            raise StageError("missing-input", f"config file {p} not found")
        text = p.read_text()
    else:
        text = ""
    cfg = parse_config(text)
    if seed_override is not None:
        cfg.values["seed"] = str(seed_override)
        cfg.seed = seed_override
    return cfg


def _script(cfg: RunConfig) -> synth.BreathScript:
    if cfg.segments:
        return synth.parse_script(
            "\n".join(f"segment = {s}" for s in cfg.segments))
    return synth.default_script(
        total_duration_s=cfg.get_float("synth.duration_s"),
        breathing_rate_bpm=cfg.get_float("synth.rate_bpm"))


def _rf_config(cfg: RunConfig) -> synth.RfConfig:
    return synth.RfConfig(
        tx_power_w=cfg.get_float("synth.tx_power_w"),
        reader_gain=cfg.get_float("synth.reader_gain"),
        tag_gain=cfg.get_float("synth.tag_gain"),
        distance_m=cfg.get_float("synth.distance_m"),
        return_loss=cfg.get_float("synth.return_loss"),
        channel_count=cfg.get_int("synth.channel_count"),
        band_center_hz=cfg.get_float("synth.band_center_hz"),
        interrogation_rate_hz=cfg.get_float("synth.interrogation_rate_hz"),
        noise_sigma_db=cfg.get_float("synth.noise_sigma_db"),
        breath_amplitude_m=cfg.get_float("synth.breath_amplitude_m"),
        gain_mod_frac=cfg.get_float("synth.gain_mod_frac"),
        seed=cfg.seed,
    )


def _stamp(fh, cfg: RunConfig) -> None:
    fh.write(f"# config_sha256={cfg.sha256} seed={cfg.seed}\n")


def _r(v) -> str:
    """Shortest round-trip decimal for CSV floats."""
    return repr(float(v))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise StageError("missing-input", f"{what} not found at {path}; run the producing stage first")
    return path


def _load_dataset(out: Path) -> features.Dataset:
    _require(out / "dataset" / "features_train.csv", "dataset")
    return features.import_dataset(out / "dataset")


def _load_model(out: Path) -> nn.CnnModel:
    return nn.load_checkpoint(_require(out / "model.json", "trained model"))


def _load_snn(out: Path) -> conv.SnnNetwork:
    return conv.load_snn(_require(out / "snn.txt", "converted network"))


def _build_mapping(net, cfg):
    grid = mapping.TileGrid(
        rows=cfg.get_int("map.rows"), cols=cfg.get_int("map.cols"),
        neuron_capacity=cfg.get_int("map.neuron_capacity"),
        synapse_capacity=cfg.get_int("map.synapse_capacity"))
    clusters = mapping.partition(net, grid)
    traffic = mapping.cluster_traffic(net, clusters)
    return grid, mapping.place(clusters, grid, traffic)


def _model_factory(cfg: RunConfig, input_len: int):
    hidden = tuple(cfg.get_list("model.hidden", int))

    def factory(seed):
        seed_int = int(np.random.default_rng(seed).integers(2 ** 31))
        return nn.build_default_model(
            input_len=input_len, in_channels=2,
            conv_filters=cfg.get_int("model.conv_filters"),
            kernel=cfg.get_int("model.kernel"), hidden=hidden,
            dropout=cfg.get_float("model.dropout"), seed=seed_int)
    return factory


def _hyper(cfg: RunConfig) -> trainer.Hyperparameters:
    return trainer.Hyperparameters(
        learning_rate=cfg.get_float("train.learning_rate"),
        batch_size=cfg.get_int("train.batch_size"),
        max_epochs=cfg.get_int("train.max_epochs"),
        patience=cfg.get_int("train.patience"),
        val_fraction=cfg.get_float("train.val_fraction"))


# --- stages -----------------------------------------------------------------

def stage_synth(cfg: RunConfig, out: Path) -> None:
    stream = synth.synthesize(_script(cfg), _rf_config(cfg))
    out.mkdir(parents=True, exist_ok=True)
    stream.to_csv(out / "observations.csv")
    with open(out / "script.txt", "w", newline="\n") as fh:
        fh.write(synth.format_script(_script(cfg)))


def stage_featurize(cfg: RunConfig, out: Path) -> None:
    path = _require(out / "observations.csv", "observation stream")
    stream = synth.ObservationStream.from_csv(path)
    script = synth.parse_script(_require(out / "script.txt", "script").read_text())
    windows = features.windowize(
        stream, script, _rf_config(cfg),
        window_s=cfg.get_float("features.window_s"),
        samples_per_window=cfg.get_int("features.samples_per_window"))
    dataset = features.split(windows, seed=cfg.seed,
                             test_fraction=cfg.get_float("features.test_fraction"))
    features.export_dataset(dataset, out / "dataset")


def stage_train(cfg: RunConfig, out: Path) -> None:
    dataset = _load_dataset(out)
    input_len = dataset.train[0].samples.shape[0]
    model = _model_factory(cfg, input_len)((cfg.seed, 1))
    history = trainer.train(model, dataset.train, _hyper(cfg), seed=cfg.seed)
    nn.save_checkpoint(model, out / "model.json")
    x, y = trainer.windows_to_arrays(dataset.test)
    probs = model.forward(x)
    report = metrics.evaluate(probs.argmax(axis=1), y, probs[:, 1])
    with open(out / "history.csv", "w", newline="\n") as fh:
        _stamp(fh, cfg)
        fh.write("epoch,train_loss,val_loss,val_accuracy\n")
        for i in range(len(history.train_loss)):
            fh.write(f"{i + 1},{_r(history.train_loss[i])},"
                     f"{_r(history.val_loss[i])},{_r(history.val_accuracy[i])}\n")
    with open(out / "test_metrics.csv", "w", newline="\n") as fh:
        _stamp(fh, cfg)
        fh.write("accuracy,precision,recall,f1,auc,sensitivity,specificity\n")
        fh.write(f"{_r(report.accuracy)},{_r(report.precision)},{_r(report.recall)},"
                 f"{_r(report.f1)},{_r(report.auc)},{_r(report.sensitivity)},"
                 f"{_r(report.specificity)}\n")


def stage_tune(cfg: RunConfig, out: Path) -> None:
    dataset = _load_dataset(out)
    input_len = dataset.train[0].samples.shape[0]
    space = trainer.TuneSpace(
        epochs=tuple(cfg.get_list("tune.epochs", int)),
        learning_rates=tuple(cfg.get_list("tune.learning_rates")))
    result = trainer.grid_search(space, _model_factory(cfg, input_len),
                                 dataset.train, _hyper(cfg), seed=cfg.seed)
    with open(out / "grid.csv", "w", newline="\n") as fh:
        _stamp(fh, cfg)
        fh.write("epochs,learning_rate,val_accuracy\n")
        for epochs, lr, acc in result.entries:
            fh.write(f"{epochs},{_r(lr)},{_r(acc)}\n")
        fh.write(f"# best epochs={result.best_epochs} lr={_r(result.best_lr)} "
                 f"accuracy={_r(result.best_accuracy)}\n")


def stage_quantize(cfg: RunConfig, out: Path) -> None:
    dataset = _load_dataset(out)
    model = _load_model(out)
    x, y = trainer.windows_to_arrays(dataset.test)
    n_cal = min(cfg.get_int("quant.calibration_windows"), len(dataset.train))
    cal, _ = trainer.windows_to_arrays(dataset.train[:n_cal])
    calib = quant.EnergyCalibration.fit()
    with open(out / "quant.csv", "w", newline="\n") as fh:
        _stamp(fh, cfg)
        fh.write("k,accuracy,energy_pj,model_size_bits\n")
        for k in cfg.get_list("quant.ks", int):
            qm = quant.quantize_model(model, quant.QuantConfig(k=k), calibration=cal)
            acc = float((quant.quantized_predict(qm, x) == y).mean())
            report = quant.cnn_energy(model, k, calib)
            fh.write(f"{k},{_r(acc)},{_r(report.total_pj)},{report.model_size_bits}\n")


def stage_convert(cfg: RunConfig, out: Path) -> None:
    dataset = _load_dataset(out)
    model = _load_model(out)
    cal, _ = trainer.windows_to_arrays(dataset.train[:200])
    net = conv.convert(model)
    net = conv.normalize_weights(net, cal,
                                 percentile=cfg.get_float("convert.percentile"))
    conv.save_snn(net, out / "snn.txt")


def stage_map(cfg: RunConfig, out: Path) -> None:
    net = _load_snn(out)
    grid, tile_map = _build_mapping(net, cfg)
    with open(out / "mapping.csv", "w", newline="\n") as fh:
        _stamp(fh, cfg)
        fh.write("neuron_id,cluster_id,tile_row,tile_col\n")
        for ci, members in enumerate(tile_map.clusters):
            row, col = grid.coords(int(tile_map.tiles[ci]))
            for nid in members:
                fh.write(f"{nid},{ci},{row},{col}\n")


def stage_simulate(cfg: RunConfig, out: Path) -> None:
    dataset = _load_dataset(out)
    net = _load_snn(out)
    grid, tile_map = _build_mapping(net, cfg)
    n_eval = min(cfg.get_int("sim.eval_windows"), len(dataset.test))
    windows = dataset.test[:n_eval]
    profile = sim.thinning_profile(net.n_layers, cfg.get_float("sim.thinning"))
    sim_cfg = sim.SimConfig(timesteps=cfg.get_int("sim.timesteps"),
                            v_th_mv=cfg.get_float("sim.v_th_mv"),
                            v_th_profile=profile, seed=cfg.seed)
    stats = sim.classify(net, windows, sim_cfg)
    with open(out / "sim_summary.csv", "w", newline="\n") as fh:
        _stamp(fh, cfg)
        fh.write("window_id,predicted,label,total_spikes,energy_pj\n")
        for i in range(len(windows)):
            e = mapping.energy(stats.spike_counts[i], tile_map, grid, net)
            fh.write(f"{i},{stats.predictions[i]},{stats.labels[i]},"
                     f"{int(stats.total_spikes_per_window[i])},{_r(e.total_pj)}\n")
    with open(out / "sim_metrics.csv", "w", newline="\n") as fh:
        _stamp(fh, cfg)
        r = stats.report
        fh.write("accuracy,precision,recall,f1,auc,sensitivity,specificity\n")
        fh.write(f"{_r(r.accuracy)},{_r(r.precision)},{_r(r.recall)},{_r(r.f1)},"
                 f"{_r(r.auc)},{_r(r.sensitivity)},{_r(r.specificity)}\n")


def stage_explore(cfg: RunConfig, out: Path) -> None:
    dataset = _load_dataset(out)
    net = _load_snn(out)
    grid, tile_map = _build_mapping(net, cfg)
    points = dse.sweep(
        net, dataset.test, tile_map, grid,
        thresholds=cfg.get_list("explore.thresholds"),
        timesteps=cfg.get_list("explore.timesteps", int),
        sample_sizes=cfg.get_list("explore.sample_sizes", int),
        v_th_profile=sim.thinning_profile(net.n_layers,
                                          cfg.get_float("sim.thinning")),
        seed=cfg.seed)
    frontier = dse.pareto(points)
    with open(out / "sweep.csv", "w", newline="\n") as fh:
        _stamp(fh, cfg)
        fh.write("v_th_mv,timesteps,sample_size,accuracy,energy_pj\n")
        for p in points:
            fh.write(f"{_r(p.v_th_mv)},{p.timesteps},{p.sample_size},"
                     f"{_r(p.accuracy)},{_r(p.energy_pj)}\n")
    with open(out / "pareto.csv", "w", newline="\n") as fh:
        _stamp(fh, cfg)
        fh.write("v_th_mv,timesteps,sample_size,accuracy,energy_pj\n")
        for p in frontier:
            fh.write(f"{_r(p.v_th_mv)},{p.timesteps},{p.sample_size},"
                     f"{_r(p.accuracy)},{_r(p.energy_pj)}\n")
    write_scatter_svg(out / "pareto.svg",
                      [(p.energy_pj, p.accuracy) for p in points],
                      [(p.energy_pj, p.accuracy) for p in frontier],
                      "energy (pJ per inference)", "accuracy")


def stage_report(cfg: RunConfig, out: Path) -> None:
    lines = [f"# config_sha256={cfg.sha256} seed={cfg.seed}", ""]
    test_metrics = out / "test_metrics.csv"
    if test_metrics.exists():
        rows = test_metrics.read_text().splitlines()
        header, vals = rows[1].split(","), rows[2].split(",")
        lines.append("== Classifier test metrics ==")
        for h, v in zip(header, vals):
            lines.append(f"{h:14s} {v}")
        lines.append("")
    quant_csv = out / "quant.csv"
    if quant_csv.exists():
        lines.append("== Quantization sweep (k, accuracy, energy pJ, size bits) ==")
        lines.extend(quant_csv.read_text().splitlines()[1:])
        lines.append("")
    sim_metrics = out / "sim_metrics.csv"
    if sim_metrics.exists():
        lines.append("== Spiking network metrics ==")
        lines.extend(sim_metrics.read_text().splitlines()[1:])
        lines.append("")
    pareto_csv = out / "pareto.csv"
    if pareto_csv.exists():
        lines.append("== Accuracy-energy frontier ==")
        lines.extend(pareto_csv.read_text().splitlines()[1:])
        lines.append("")
    if not any((out / f).exists() for f in
               ("test_metrics.csv", "quant.csv", "sim_metrics.csv", "pareto.csv")):
        raise StageError("missing-input", "no stage outputs found to report on")
    (out / "report.txt").write_text("\n".join(lines) + "\n")


def write_scatter_svg(path, points, frontier, xlabel, ylabel,
                      width=480, height=360) -> None:
    """Minimal static SVG scatter; hand-rolled to keep output byte-stable."""
    margin = 50
    xs = [p[0] for p in points] or [0.0, 1.0]
    ys = [p[1] for p in points] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x):
        return margin + (x - x0) / (x1 - x0) * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 10}" text-anchor="middle" '
        f'font-size="12">{xlabel}</text>',
        f'<text x="14" y="{height // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {height // 2})">{ylabel}</text>',
    ]
    for x, y in points:
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" '
                     'fill="steelblue" fill-opacity="0.6"/>')
    if len(frontier) > 1:
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in sorted(frontier))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="crimson"/>')
    for x, y in frontier:
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="4" '
                     'fill="crimson"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


STAGES = {
    "synth": stage_synth,
    "featurize": stage_featurize,
    "train": stage_train,
    "tune": stage_tune,
    "quantize": stage_quantize,
    "convert": stage_convert,
    "simulate": stage_simulate,
    "map": stage_map,
    "explore": stage_explore,
    "report": stage_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="respsnn",
        description="Respiratory-cessation classification pipeline")
    parser.add_argument("stage", choices=sorted(STAGES),
                        help="pipeline stage to run")
    parser.add_argument("--config", default=None, help="config file path")
    parser.add_argument("--seed", type=int, default=None,
                        help="master seed override")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel job limit (stages are deterministic "
                             "regardless)")
    parser.add_argument("--out", default="out", help="artifact directory")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, seed_override=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        STAGES[args.stage](cfg, out)
    except StageError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return {"missing-input": 2, "schema": 3, "config": 4}.get(exc.kind, 1)
    except (features.SchemaError, ValueError) as exc:
        print(f"error: schema: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
