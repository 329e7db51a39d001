"""End-to-end stages: space, calibrate, search, measure, report.

Each stage reads a RunConfig, writes plain files under the output directory
and logs to its own ledger (``ledger_<stage>.jsonl``, rewritten per run).
"""
from __future__ import annotations

import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .arch_space import (
    Architecture,
    ExpansionGrid,
    TensorShape,
    embed,
    enumerate_base_space,
    enumerate_expanded_space,
    expanded_space_size,
    extract_kernels,
    read_architectures,
    sample_expanded,
    sample_space,
    validate,
    write_architectures,
    BASE_SPACE_SIZE,
)
from .config import RunConfig
from .harness import HarnessError, VirtualDevice, accuracy_field, measure, measure_kernel, profile_kernels, run_inference, write_events, write_trace
from .kernel_energy import (
    EnergySample,
    PredictorModel,
    TrainHyper,
    evaluate,
    generate_configs,
    predict_kernels,
    read_samples,
    rmse,
    train_predictor,
    write_samples,
)
from .ledger import Ledger, read_ledger, replay_search
from .naswot import score_architecture
from .pareto import (
    Constraints,
    Observation,
    OracleError,
    best_models,
    front_rows,
    init_search,
    refresh_predictions,
    search_iteration,
    write_front_csv,
)
from .transfer import FINE_TUNE_HYPER, PredictorZoo, fine_tune, kl_table, select_calibration_set

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_ORACLE = 4


def _out(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ledger(cfg: RunConfig, stage: str) -> Ledger:
    return Ledger(_out(cfg) / f"ledger_{stage}.jsonl", truncate=True)


def input_shape(cfg: RunConfig) -> TensorShape:
    return TensorShape(*cfg["space"]["input"])


def make_device(spec: dict, cfg: RunConfig) -> VirtualDevice:
    spec = dict(spec)
    spec.setdefault("seed", cfg.seeds["harness"])
    return VirtualDevice(**spec)


def build_grid(cfg: RunConfig) -> ExpansionGrid:
    g = cfg["space"]["grid"] or {}
    return ExpansionGrid(**{k: tuple(v) for k, v in g.items()})


def build_pool(cfg: RunConfig) -> list[Architecture]:
    sp = cfg["space"]
    shape = input_shape(cfg)
    if sp["kind"] == "base":
        if shape == TensorShape(32, 32, 16):
            return sample_space(cfg.seeds["space"], sp["pool_size"])
        pool = [a for a in enumerate_base_space() if validate(a, shape).valid]
        return sample_space(cfg.seeds["space"], sp["pool_size"], pool=pool)
    return sample_expanded(cfg.seeds["space"], sp["pool_size"], build_grid(cfg), shape)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# space
# ---------------------------------------------------------------------------

def cmd_space(cfg: RunConfig) -> dict:
    out = _out(cfg)
    led = _ledger(cfg, "space")
    sp = cfg["space"]
    shape = input_shape(cfg)
    summary: dict = {"kind": sp["kind"], "input": str(shape)}
    if sp["kind"] == "base":
        valid = [a for a in enumerate_base_space() if validate(a, shape).valid]
        summary.update(total=BASE_SPACE_SIZE, valid=len(valid), invalid=BASE_SPACE_SIZE - len(valid))
        write_architectures(out / "space.jsonl", valid)
    else:
        grid = build_grid(cfg)
        total = expanded_space_size(grid)
        summary.update(total=total, grid_size_per_edge=grid.size)
        if total <= sp["max_enumerate"]:
            valid = [a for a in enumerate_expanded_space(grid) if validate(a, shape).valid]
            summary.update(valid=len(valid), invalid=total - len(valid))
            write_architectures(out / "space.jsonl", valid)
        else:
            # too large to filter exhaustively; write a seeded sample of valid members
            sample = sample_expanded(cfg.seeds["space"], sp["pool_size"], grid, shape)
            summary.update(valid=None, sampled=len(sample))
            write_architectures(out / "space.jsonl", sample)
    pool = build_pool(cfg)
    write_architectures(out / "pool.jsonl", pool)
    summary["pool"] = len(pool)
    _write_json(out / "space_summary.json", summary)
    led.append("space", "summary", metrics=summary, files=["space.jsonl", "pool.jsonl", "space_summary.json"])
    return summary


# ---------------------------------------------------------------------------
# predictors and calibration
# ---------------------------------------------------------------------------

def _train_on_device(device: VirtualDevice, n: int, seed: int, harness_seed: int) -> tuple[PredictorModel, list[EnergySample]]:
    samples = profile_kernels(device, generate_configs(seed, n), harness_seed)
    return train_predictor(samples, TrainHyper(seed=seed)), samples


def build_zoo(cfg: RunConfig) -> PredictorZoo:
    pr = cfg["predictor"]
    if pr["zoo_path"]:
        return PredictorZoo.load_dir(pr["zoo_path"])
    models = []
    for k, spec in enumerate(cfg["devices"]["zoo"]):
        dev = make_device(spec, cfg)
        m, _ = _train_on_device(dev, pr["train_samples"], cfg.seeds["predictor"] + k, cfg.seeds["harness"])
        models.append(m)
    return PredictorZoo.from_models(models)


def cmd_calibrate(cfg: RunConfig) -> dict:
    out = _out(cfg)
    led = _ledger(cfg, "calibrate")
    cal = cfg["calibration"]
    target = make_device(cfg["devices"]["target"], cfg)
    zoo = build_zoo(cfg)
    if not len(zoo):
        raise ValueError("calibration needs a predictor zoo (devices.zoo or predictor.zoo_path)")
    zoo.save_dir(out / "zoo")
    led.append("calibrate", "zoo", entries=sorted(f"{d}/{b}" for d, b in zoo.entries), files=["zoo/"])

    pool = generate_configs(cfg.seeds["calibration"], cal["pool_size"])
    plan = select_calibration_set(pool, cal["budget"], cfg.seeds["calibration"])
    write_samples(out / "calibration_plan.csv", [EnergySample(c, 0.0, target.backend, target.device_id) for c in plan.configs], with_energy=False)
    samples = profile_kernels(target, plan.configs, cfg.seeds["harness"])
    write_samples(out / "calibration_samples.csv", samples)

    table = kl_table(zoo, samples)
    led.append("calibrate", "kl_table", metrics={"kl": [[d, b, kl] for d, b, kl in table]})
    base = zoo.entries[(table[0][0], table[0][1])]
    adapted = fine_tune(base, samples, TrainHyper(seed=cfg.seeds["predictor"], **FINE_TUNE_HYPER))

    holdout = profile_kernels(target, generate_configs(cfg.seeds["calibration"] + 1, cal["holdout"]), cfg.seeds["harness"] + 1)
    m_base, m_new = evaluate(base, holdout), evaluate(adapted, holdout)
    adapted.save(out / "predictor.json")
    write_samples(out / "predictor_samples.csv", samples)
    result = {
        "base_device": base.device_id,
        "budget": cal["budget"],
        "base": asdict(m_base),
        "adapted": asdict(m_new),
        "kept_base_weights": adapted.training_meta["kept_base_weights"],
    }
    led.append("calibrate", "result", metrics=result, files=["predictor.json", "calibration_samples.csv"])
    return result


def load_or_train_predictor(cfg: RunConfig, led: Ledger) -> tuple[PredictorModel, list[EnergySample]]:
    out = _out(cfg)
    f, s = out / "predictor.json", out / "predictor_samples.csv"
    if f.exists() and s.exists():
        model, samples = PredictorModel.load(f), read_samples(s)
        led.append("search", "predictor", source="calibrated", sample_count=len(samples), files=[f.name])
        return model, samples
    target = make_device(cfg["devices"]["target"], cfg)
    model, samples = _train_on_device(target, cfg["predictor"]["train_samples"], cfg.seeds["predictor"], cfg.seeds["harness"])
    led.append("search", "predictor", source="trained", sample_count=len(samples))
    return model, samples


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

def predict_pool(model: PredictorModel, archs: list[Architecture], shape: TensorShape) -> dict[str, float]:
    """Predicted per-inference energy (sum of kernel predictions) for every arch."""
    per_arch = {a.id: extract_kernels(a, shape) for a in archs}
    unique = sorted({k for ks in per_arch.values() for k in ks})
    pred = dict(zip(unique, predict_kernels(model, unique)))
    return {i: float(sum(pred[k] for k in ks)) for i, ks in per_arch.items()}


def proxy_scores(cfg: RunConfig, archs: list[Architecture], target: VirtualDevice) -> dict[str, float]:
    if cfg["search"]["score"] == "accuracy":
        # oracle proxy: the device's hidden accuracy field (fast, for experiments)
        return {a.id: accuracy_field(target, embed(a)) for a in archs}
    seed = cfg.seeds["proxy"]
    return {a.id: score_architecture(a, seed=seed, probe_seed=seed).n_s for a in archs}


def reprofile(
    model: PredictorModel,
    samples: list[EnergySample],
    archs: list[Architecture],
    device: VirtualDevice,
    shape: TensorShape,
    threshold: float,
    run_seed: int,
) -> tuple[PredictorModel, list[EnergySample], dict]:
    """Measure the kernels of ``archs``; those mispredicted by more than
    ``threshold`` join the training set and the predictor is re-trained.
    The re-trained model is kept only if it fits the grown set at least as
    well as the current one."""
    known = {s.config for s in samples}
    kernels = sorted({k for a in archs for k in extract_kernels(a, shape)} - known)
    info = {"checked": len(kernels), "added": 0, "sample_count": len(samples), "retrained": False}
    if not kernels:
        return model, samples, info
    measured = [measure_kernel(device, k, run_seed) for k in kernels]
    pred = predict_kernels(model, kernels)
    bad = [m for m, p in zip(measured, pred) if m.energy_mJ > 0 and abs(p - m.energy_mJ) / m.energy_mJ > threshold]
    if not bad:
        return model, samples, info
    grown = samples + [EnergySample(m.config, m.energy_mJ, model.backend, model.device_id) for m in bad]
    y = np.array([s.energy_mJ for s in grown])
    cfgs = [s.config for s in grown]
    before = rmse(predict_kernels(model, cfgs), y)
    hyper = TrainHyper(seed=int(model.training_meta.get("seed", 0)))
    candidate = train_predictor(grown, hyper)
    candidate.device_id, candidate.backend = model.device_id, model.backend
    after = rmse(predict_kernels(candidate, cfgs), y)
    info.update(added=len(bad), sample_count=len(grown), rmse_before=before, rmse_after=min(after, before))
    if after <= before:
        info["retrained"] = True
        return candidate, grown, info
    return model, grown, info


def _obs_record(o: Observation, iteration: int) -> dict:
    return {"energy_mJ": o.energy_mJ, "score_raw": o.score_raw, "accuracy": o.accuracy, "iteration": iteration}


def cmd_search(cfg: RunConfig) -> tuple[int, dict]:
    out = _out(cfg)
    led = _ledger(cfg, "search")
    se = cfg["search"]
    shape = input_shape(cfg)
    target = make_device(cfg["devices"]["target"], cfg)
    archs = build_pool(cfg)
    write_architectures(out / "pool.jsonl", archs)
    by_id = {a.id: a for a in archs}
    led.append("search", "pool", count=len(archs), files=["pool.jsonl"])

    model, samples = load_or_train_predictor(cfg, led)
    scores = proxy_scores(cfg, archs, target)
    energies = predict_pool(model, archs, shape)
    preds = {i: Observation(energies[i], scores[i]) for i in sorted(by_id)}
    led.append("search", "predicted", count=len(preds))

    harness_seed = cfg.seeds["harness"]

    def oracle(arch_id: str) -> Observation:
        r = measure(target, by_id[arch_id], harness_seed, shape)
        return Observation(r.energy_mJ, scores[arch_id], r.accuracy)

    fronts_dir = out / "fronts"
    fronts_dir.mkdir(exist_ok=True)
    wd_sets = cfg.wd_sets
    constraints = Constraints(**se["constraints"])

    def log_iteration(state, batch):
        for i in batch:
            e = state.evaluated[i]
            led.append("search", "measured", arch_id=i, metrics=_obs_record(Observation(e.energy_mJ, e.score_raw, e.accuracy), state.iteration))
        name = f"front_{state.iteration:03d}.csv"
        write_front_csv(fronts_dir / name, front_rows(state))
        led.append(
            "search",
            "iteration",
            iteration=state.iteration,
            front=state.front.ids,
            hypervolume=state.hv_history[-1],
            files=[f"fronts/{name}"],
        )

    try:
        state = init_search(
            {a.id: embed(a) for a in archs},
            preds,
            oracle,
            cfg.seeds["search"],
            n_init=se["n_init"],
            n_batch=se["n_batch"],
            ws=cfg.ws,
            wd=next(iter(wd_sets.values())),
            constraints=constraints,
            max_iterations=se["max_iterations"],
        )
        log_iteration(state, state.batches[0])
        while state.should_continue() and len(state.evaluated) < len(state.pool):
            state = search_iteration(state, oracle)
            batch = state.batches[-1]
            model, samples, info = reprofile(
                model, samples, [by_id[i] for i in batch], target, shape, se["reprofile_threshold"], harness_seed
            )
            if info["added"]:
                energies = predict_pool(model, archs, shape)
                state = refresh_predictions(state, {i: Observation(energies[i], scores[i]) for i in sorted(by_id)})
            led.append("search", "reprofile", iteration=state.iteration, **info)
            log_iteration(state, batch)
    except (OracleError, HarnessError) as exc:
        led.append("search", "error", message=str(exc))
        raise OracleError(str(exc)) from exc

    model.save(out / "search_predictor.json")
    if state.constraints_met():
        status = "constraints_met"
    elif constraints.empty:
        status = "completed"
    else:
        status = "budget_exhausted"
    selections = best_models(state, wd_sets)
    best = {
        name: {
            "arch_id": aid,
            "wd": dict(zip(("energy", "accuracy"), wd_sets[name])),
            "energy_mJ": state.evaluated[aid].energy_mJ,
            "accuracy": state.evaluated[aid].accuracy,
            "score_raw": state.evaluated[aid].score_raw,
            "edge_ops": [op.token for op in by_id[aid].edges],
        }
        for name, aid in selections.items()
    }
    _write_json(out / "best.json", best)
    led.append("search", "best", selections=selections, metrics=best, files=["best.json"])
    summary = {
        "status": status,
        "iterations": state.iteration,
        "evaluated": len(state.evaluated),
        "front": state.front.ids,
        "hv_history": state.hv_history,
        "ws": dict(zip(("energy", "accuracy"), cfg.ws)),
    }
    led.append("search", "finished", status=status, metrics=summary)
    code = EXIT_BUDGET if status == "budget_exhausted" else EXIT_OK
    return code, {"state": state, **summary, "best": best}


# ---------------------------------------------------------------------------
# measure
# ---------------------------------------------------------------------------

MEASURE_HEADER = ("arch_id", "T_s_us", "T_e_us", "avg_power_mW", "energy_mJ", "sample_count", "accuracy")


def cmd_measure(cfg: RunConfig) -> list[dict]:
    out = _out(cfg)
    led = _ledger(cfg, "measure")
    shape = input_shape(cfg)
    target = make_device(cfg["devices"]["target"], cfg)
    space_file = out / "pool.jsonl"
    archs = read_architectures(space_file) if space_file.exists() else build_pool(cfg)
    archs = sorted(archs, key=lambda a: a.id)[: cfg["measure"]["count"]]
    rows = []
    traces = out / "traces"
    for a in archs:
        r = measure(target, a, cfg.seeds["harness"], shape)
        rows.append(asdict(r))
        files = []
        if cfg["measure"]["write_traces"]:
            traces.mkdir(exist_ok=True)
            run = run_inference(target, a, cfg.seeds["harness"], shape)
            write_trace(traces / f"{a.id}_trace.csv", run.trace)
            write_events(traces / f"{a.id}_events.csv", run.events)
            files = [f"traces/{a.id}_trace.csv", f"traces/{a.id}_events.csv"]
        led.append("measure", "measured", arch_id=a.id, metrics=asdict(r), files=files)
    with open(out / "measurements.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEASURE_HEADER)
        for r in rows:
            w.writerow([r[k] if not isinstance(r[k], float) else repr(r[k]) for k in MEASURE_HEADER])
    return rows


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

POINT_HEADER = ("arch_id", "energy_mJ", "accuracy", "score_raw")


def cmd_report(ledger_path, out_dir, stream=None) -> dict:
    stream = stream or sys.stderr
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, issues = read_ledger(ledger_path)
    for issue in issues:
        print(f"{ledger_path}:{issue.line}: skipped corrupt record ({issue.message})", file=stream)
    st = replay_search(records)
    summary: dict = {}
    if st.fronts:
        for it, ids in sorted(st.fronts.items()):
            with open(out / f"points_{it:03d}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(POINT_HEADER)
                for i in ids:
                    m = st.evaluated[i]
                    w.writerow([i, repr(m["energy_mJ"]), repr(m["accuracy"]), repr(m["score_raw"])])
        finished = next((r for r in records if r["stage"] == "search" and r["event"] == "finished"), None)
        best = next((r for r in records if r["stage"] == "search" and r["event"] == "best"), None)
        summary = {
            "iterations": st.iteration,
            "evaluated": len(st.evaluated),
            "front_size": len(st.front),
            "hv_history": st.hv_history,
            "status": st.status,
            "best": best["metrics"] if best else {},
        }
        ws = finished["metrics"]["ws"] if finished else {}
        (out / "table.txt").write_text(comparison_table(summary["best"], ws, st.iteration))
    summary["corrupt_lines"] = [i.line for i in issues]
    _write_json(out / "summary.json", summary)
    return summary


def comparison_table(best: dict, ws: dict, iterations: int) -> str:
    """Method / weights / iterations / accuracy / mJ-per-inference block."""
    ws_label = "energy-prioritized" if ws and ws.get("energy", 0) > ws.get("accuracy", 0) else (
        "accuracy-prioritized" if ws and ws.get("accuracy", 0) > ws.get("energy", 0) else "balanced"
    )
    head = f"{'Method':<22}{'Search weights':<22}{'Selection weights':<24}{'Iter.':>6}{'Accuracy':>10}{'mJ/inf':>12}"
    lines = [head, "-" * len(head)]
    for name, b in best.items():
        acc = b.get("accuracy")
        lines.append(
            f"{'Gradient descent':<22}{ws_label:<22}{name:<24}{iterations:>6}"
            f"{(f'{acc:.2f}' if acc is not None else '-'):>10}{b['energy_mJ']:>12.2f}"
        )
    return "\n".join(lines) + "\n"
