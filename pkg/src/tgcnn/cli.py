"""Command-line orchestration of the full experiment.

Subcommands: generate, prepare, train, cv, search, ablate, evaluate,
recalibrate, stratify, report. Every run resolves a flat key=value
configuration (file plus flag overrides), and all artifacts land in a run
directory named by the config hash and seed, so identical configurations
reproduce identical outputs byte for byte.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import baselines as B
from . import cohort as C
from . import graph_builder as G
from . import metrics as MX
from . import model as M
from .errors import ConfigError, DataError, TgcnnError


class UsageError(Exception):
    """Bad flags, unknown subcommand, or unknown config key."""


# ---------------------------------------------------------------------------
# RunConfig: flat key=value schema covering generator, cohort, model, and paths
# ---------------------------------------------------------------------------

_SCHEMA: dict[str, tuple] = {
    # global
    "seed": (int, 7),
    "out_dir": (str, "runs"),
    # input paths; empty means "the run directory's own data/ folder"
    "events_path": (str, ""),
    "demographics_path": (str, ""),
    "outcomes_path": (str, ""),
    # generator
    "n_patients": (int, 1000),
    "case_prevalence": (float, 0.07),
    "gen_vocabulary_size": (int, 60),
    "mean_visits": (float, 12.0),
    "mean_codes_per_visit": (float, 1.36),
    "period_start": (str, "1999-04-01"),
    "period_end": (str, "2014-03-31"),
    "case_visit_multiplier": (float, 1.5),
    "signal_window_months": (float, 42.0),
    "signal_strength": (float, 0.9),
    "control_signal_rate": (float, 0.02),
    "include_prescriptions": (bool, False),
    "prescription_rate": (float, 0.15),
    "deceased_fraction": (float, 0.0),
    # cohort protocol
    "horizon_months": (int, 12),
    "max_age_gap": (int, 5),
    "test_fraction": (float, 0.10),
    "k_folds": (int, 5),
    # vocabulary / tensor
    "vocab_size": (int, 64),
    "n_time_slots": (int, 16),
    "slot_limit": (str, "transitions"),
    "intra_visit_edges": (bool, False),
    # model (ablation flags + sizes + schedule)
    "ablation": (str, "full"),
    "use_gamma": (bool, True),
    "use_exp": (bool, True),
    "use_demographics": (bool, True),
    "use_two_streams": (bool, True),
    "use_graph_reg": (bool, True),
    "use_l2": (bool, True),
    "use_l1": (bool, True),
    "use_lstm": (bool, True),
    "use_elapsed_time": (bool, True),
    "use_prescriptions": (bool, False),
    "n_filters": (int, 8),
    "filter_depth": (int, 3),
    "lstm_hidden": (int, 16),
    "dense_sizes": (str, "16"),
    "dropout_rate": (float, 0.2),
    "lambda1": (float, 1e-5),
    "lambda2": (float, 1e-5),
    "lambda_g": (float, 1e-4),
    "lr": (float, 5e-3),
    "batch_size": (int, 32),
    "max_epochs": (int, 25),
    "patience": (int, 6),
    "share_gamma": (bool, False),
    "validation_fold": (int, 0),
    # search / bootstrap
    "n_trials": (int, 20),
    "n_bootstrap": (int, 500),
}


class RunConfig:
    """Resolved flat configuration; unknown keys are rejected."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key: str):
        return self.values[key]

    def lines(self) -> list[str]:
        out = []
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            out.append(f"{key} = {text}")
        return out

    def content_hash(self) -> str:
        digest = hashlib.sha256("\n".join(self.lines()).encode()).hexdigest()
        return digest[:12]

    def run_dir(self) -> Path:
        return Path(self["out_dir"]) / f"run-{self.content_hash()}-s{self['seed']}"


def _coerce(key: str, text: str):
    kind = _SCHEMA[key][0]
    text = text.strip()
    if kind is bool:
        if text not in ("true", "false"):
            raise UsageError(f"config key {key}: expected true/false, got {text!r}")
        return text == "true"
    try:
        return kind(text)
    except ValueError:
        raise UsageError(f"config key {key}: cannot parse {text!r} as "
                         f"{kind.__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"{source}: line {lineno}: expected 'key = value'")
        if key not in _SCHEMA:
            raise UsageError(f"{source}: line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return values


def load_config(path: str | None, overrides: dict) -> RunConfig:
    """Defaults, then file values, then flag overrides; echoed for provenance."""
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise DataError(f"config file not found: {path}")
        values.update(parse_config_text(p.read_text(), source=str(path)))
    for key, text in overrides.items():
        if key not in _SCHEMA:
            raise UsageError(f"unknown config key {key!r}")
        values[key] = _coerce(key, text) if isinstance(text, str) else text
    return RunConfig(values)


def generator_config(cfg: RunConfig) -> C.GeneratorConfig:
    return C.GeneratorConfig(
        n_patients=cfg["n_patients"], case_prevalence=cfg["case_prevalence"],
        vocabulary_size=cfg["gen_vocabulary_size"], mean_visits=cfg["mean_visits"],
        mean_codes_per_visit=cfg["mean_codes_per_visit"],
        period_start=dt.date.fromisoformat(cfg["period_start"]),
        period_end=dt.date.fromisoformat(cfg["period_end"]),
        case_visit_multiplier=cfg["case_visit_multiplier"],
        signal_window_months=cfg["signal_window_months"],
        signal_strength=cfg["signal_strength"],
        control_signal_rate=cfg["control_signal_rate"],
        include_prescriptions=cfg["include_prescriptions"],
        prescription_rate=cfg["prescription_rate"],
        deceased_fraction=cfg["deceased_fraction"])


def model_config(cfg: RunConfig, ablation: str | None = None) -> M.ModelConfig:
    sizes = tuple(int(v) for v in str(cfg["dense_sizes"]).split(",") if v.strip())
    base = M.ModelConfig(
        use_gamma=cfg["use_gamma"], use_exp=cfg["use_exp"],
        use_demographics=cfg["use_demographics"],
        use_two_streams=cfg["use_two_streams"], use_graph_reg=cfg["use_graph_reg"],
        use_l2=cfg["use_l2"], use_l1=cfg["use_l1"], use_lstm=cfg["use_lstm"],
        use_elapsed_time=cfg["use_elapsed_time"],
        use_prescriptions=cfg["use_prescriptions"],
        n_filters=cfg["n_filters"], filter_depth=cfg["filter_depth"],
        lstm_hidden=cfg["lstm_hidden"], dense_sizes=sizes,
        dropout_rate=cfg["dropout_rate"], lambda1=cfg["lambda1"],
        lambda2=cfg["lambda2"], lambda_g=cfg["lambda_g"], lr=cfg["lr"],
        batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"],
        patience=cfg["patience"], seed=cfg["seed"],
        n_time_slots=cfg["n_time_slots"], slot_limit=cfg["slot_limit"],
        intra_visit_edges=cfg["intra_visit_edges"],
        horizon_months=cfg["horizon_months"], share_gamma=cfg["share_gamma"],
        validation_fold=cfg["validation_fold"])
    name = ablation if ablation is not None else cfg["ablation"]
    return M.ablation_config(name, base)


# ---------------------------------------------------------------------------
# Run-directory helpers
# ---------------------------------------------------------------------------

def _init_run_dir(cfg: RunConfig) -> Path:
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved.cfg").write_text("\n".join(cfg.lines()) + "\n")
    return run_dir


def _data_paths(cfg: RunConfig, run_dir: Path) -> tuple[Path, Path, Path]:
    data_dir = run_dir / "data"
    events = Path(cfg["events_path"]) if cfg["events_path"] else data_dir / "events.csv"
    demo = (Path(cfg["demographics_path"]) if cfg["demographics_path"]
            else data_dir / "demographics.csv")
    outcomes = (Path(cfg["outcomes_path"]) if cfg["outcomes_path"]
                else data_dir / "outcomes.csv")
    return events, demo, outcomes


def _load_windowed(cfg: RunConfig, run_dir: Path) -> list[C.PatientHistory]:
    events, demo, outcomes = _data_paths(cfg, run_dir)
    histories = C.ingest_cohort(events, demo, outcomes)
    windowed = [C.apply_time_window(h, cfg["horizon_months"]) for h in histories]
    return C.apply_inclusion_criteria(windowed)


def _load_split(cfg: RunConfig, run_dir: Path) -> tuple[C.CohortSplit, dict[str, C.PatientHistory]]:
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no split manifest at {manifest_path}; run 'prepare' first")
    manifest = json.loads(manifest_path.read_text())
    included = _load_windowed(cfg, run_dir)
    by_id = {h.patient_id: h for h in included}

    def fetch(ids):
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DataError(f"manifest patients missing from data: {missing[:5]}")
        return [by_id[i] for i in ids]

    split = C.CohortSplit(
        matched_train=fetch(manifest["matched_train"]),
        test1=fetch(manifest["test1"]), test2=fetch(manifest["test2"]),
        fold_assignment={k: int(v) for k, v in manifest["fold_assignment"].items()},
        pairs=[C.MatchPair(*p) for p in manifest["pairs"]],
        unmatched_case_ids=list(manifest["unmatched_case_ids"]))
    return split, by_id


def _build_vocab(cfg: RunConfig, split: C.CohortSplit,
                 mcfg: M.ModelConfig) -> G.CodeVocabulary:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        vocab = G.build_vocabulary(split.matched_train, max_codes=cfg["vocab_size"])
    if mcfg.use_prescriptions:
        vocab = G.extend_vocabulary_with_prescriptions(vocab)
    return vocab


def _checkpoint_path(run_dir: Path, ablation: str) -> Path:
    return run_dir / (f"checkpoint-{ablation}.bin" if ablation != "full"
                      else "checkpoint.bin")


def _fmt(x) -> str:
    if x is None:
        return "undefined"
    x = float(x)
    return "nan" if np.isnan(x) else f"{x:.4f}"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> int:
    run_dir = _init_run_dir(cfg)
    histories = C.generate_synthetic_cohort(generator_config(cfg), seed=cfg["seed"])
    C.write_cohort_csvs(histories, run_dir / "data")
    n_cases = sum(h.label for h in histories)
    print(f"generate: {len(histories)} patients ({n_cases} cases) -> {run_dir / 'data'}")
    return 0


def cmd_prepare(cfg: RunConfig) -> int:
    run_dir = _init_run_dir(cfg)
    included = _load_windowed(cfg, run_dir)
    split = C.split_cohort(included, seed=cfg["seed"],
                           test_fraction=cfg["test_fraction"],
                           max_age_gap=cfg["max_age_gap"], n_folds=cfg["k_folds"])
    manifest = {
        "matched_train": [h.patient_id for h in split.matched_train],
        "test1": [h.patient_id for h in split.test1],
        "test2": [h.patient_id for h in split.test2],
        "fold_assignment": split.fold_assignment,
        "pairs": [[p.case_id, p.control_id, p.age_difference_years]
                  for p in split.pairs],
        "unmatched_case_ids": split.unmatched_case_ids,
    }
    (run_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"prepare: matched_train={len(split.matched_train)} "
          f"test1={len(split.test1)} test2={len(split.test2)} "
          f"unmatched={len(split.unmatched_case_ids)} -> {run_dir / 'manifest.json'}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    run_dir = _init_run_dir(cfg)
    split, _ = _load_split(cfg, run_dir)
    mcfg = model_config(cfg)
    vocab = _build_vocab(cfg, split, mcfg)
    params, history = M.train(split, vocab, mcfg)
    ckpt = _checkpoint_path(run_dir, cfg["ablation"])
    M.save_checkpoint(ckpt, params, mcfg)
    history_path = ckpt.with_suffix(".history.csv")
    history_path.write_text(M.history_to_csv(history))
    best = max(history, key=lambda r: r.val_acc)
    print(f"train[{cfg['ablation']}]: {len(history)} epochs, best val_acc="
          f"{best.val_acc:.4f} val_auroc={_fmt(best.val_auroc)} -> {ckpt}")
    return 0


def _cv_table(results: dict[str, M.CVResult]) -> str:
    lines = ["model,fold,train_auroc,val_auroc,train_cslope,val_cslope,val_accuracy"]
    for name, cv in results.items():
        for f in cv.folds:
            lines.append(f"{name},{f.fold},{_fmt(f.train_auroc)},{_fmt(f.val_auroc)},"
                         f"{_fmt(f.train_cslope)},{_fmt(f.val_cslope)},"
                         f"{_fmt(f.val_accuracy)}")
        agg = cv.aggregate()
        lines.append(f"{name},mean(SD)," +
                     ",".join(f"{_fmt(agg[k][0])} ({_fmt(agg[k][1])})"
                              for k in ("train_auroc", "val_auroc", "train_cslope",
                                        "val_cslope", "val_accuracy")))
    return "\n".join(lines) + "\n"


def cmd_cv(cfg: RunConfig) -> int:
    run_dir = _init_run_dir(cfg)
    split, _ = _load_split(cfg, run_dir)
    mcfg = model_config(cfg)
    vocab = _build_vocab(cfg, split, mcfg)
    cv = M.cross_validate(split.matched_train, split.fold_assignment, vocab, mcfg)
    (run_dir / "cv_table.csv").write_text(_cv_table({cfg["ablation"]: cv}))
    agg = cv.aggregate()
    print(f"cv[{cfg['ablation']}]: val_auroc={_fmt(agg['val_auroc'][0])} "
          f"({_fmt(agg['val_auroc'][1])}), val_cslope={_fmt(agg['val_cslope'][0])} "
          f"({_fmt(agg['val_cslope'][1])}) -> {run_dir / 'cv_table.csv'}")
    return 0


def cmd_search(cfg: RunConfig) -> int:
    run_dir = _init_run_dir(cfg)
    split, _ = _load_split(cfg, run_dir)
    mcfg = model_config(cfg)
    vocab = _build_vocab(cfg, split, mcfg)
    best, trials = M.random_search(split.matched_train, split.fold_assignment,
                                   vocab, mcfg, n_trials=cfg["n_trials"],
                                   seed=cfg["seed"])
    lines = ["trial,lr,lambda1,lambda2,lambda_g,n_filters,filter_depth,"
             "lstm_hidden,dropout_rate,mean_val_accuracy,mean_val_auroc"]
    for t in trials:
        c = t.config
        lines.append(f"{t.trial},{c.lr!r},{c.lambda1!r},{c.lambda2!r},{c.lambda_g!r},"
                     f"{c.n_filters},{c.filter_depth},{c.lstm_hidden},"
                     f"{c.dropout_rate!r},{t.mean_val_accuracy!r},{t.mean_val_auroc!r}")
    (run_dir / "search_trials.csv").write_text("\n".join(lines) + "\n")
    (run_dir / "best_config.cfg").write_text(
        "\n".join(M.config_to_lines(best)) + "\n")
    print(f"search: {len(trials)} trials -> {run_dir / 'best_config.cfg'}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    run_dir = _init_run_dir(cfg)
    split, _ = _load_split(cfg, run_dir)
    rows = ["variant,epochs,train_auroc,val_auroc,train_cslope,val_cslope,val_accuracy"]
    for name in M.ABLATION_NAMES:
        mcfg = model_config(cfg, ablation=name)
        vocab = _build_vocab(cfg, split, mcfg)
        val_fold = mcfg.validation_fold
        train_h = [h for h in split.matched_train
                   if split.fold_assignment.get(h.patient_id) != val_fold]
        val_h = [h for h in split.matched_train
                 if split.fold_assignment.get(h.patient_id) == val_fold]
        fit = M.train_model(train_h, val_h, vocab, mcfg)
        M.save_checkpoint(run_dir / f"checkpoint-{name}.bin", fit.params, mcfg)
        train_eval = M._evaluate(fit.params, M.prepare_patients(train_h, vocab, mcfg), mcfg)
        val_eval = M._evaluate(fit.params, M.prepare_patients(val_h, vocab, mcfg), mcfg)
        rows.append(f"{name},{len(fit.history)},{_fmt(train_eval.auroc)},"
                    f"{_fmt(val_eval.auroc)},{_fmt(train_eval.cslope)},"
                    f"{_fmt(val_eval.cslope)},{_fmt(val_eval.accuracy)}")
        print(f"ablate[{name}]: val_auroc={_fmt(val_eval.auroc)}")
    (run_dir / "ablation.csv").write_text("\n".join(rows) + "\n")
    print(f"ablate: {len(M.ABLATION_NAMES)} variants -> {run_dir / 'ablation.csv'}")
    return 0


def _partition(split: C.CohortSplit, name: str) -> list[C.PatientHistory]:
    if name == "train":
        return split.matched_train
    if name == "test1":
        return split.test1
    if name == "test2":
        return split.test2
    raise UsageError(f"unknown partition {name!r} (expected train, test1, test2)")


def _predictions_csv(predictions) -> str:
    lines = ["patient_id,label,probability,linear_predictor"]
    for p in predictions:
        lines.append(f"{p.patient_id},{int(p.label)},{p.probability!r},"
                     f"{p.linear_predictor!r}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(cfg: RunConfig, partition: str) -> int:
    run_dir = _init_run_dir(cfg)
    split, _ = _load_split(cfg, run_dir)
    ckpt = _checkpoint_path(run_dir, cfg["ablation"])
    if not ckpt.exists():
        raise DataError(f"no checkpoint at {ckpt}; run 'train' first")
    params, mcfg = M.load_checkpoint(ckpt)
    vocab = _build_vocab(cfg, split, mcfg)
    preds = M.predict(params, _partition(split, partition), vocab, mcfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = MX.compute_report(preds, n_boot=cfg["n_bootstrap"], seed=cfg["seed"])
    (run_dir / f"predictions_{partition}.csv").write_text(_predictions_csv(preds))
    (run_dir / f"metrics_{partition}.json").write_text(MX.report_to_json(report))
    (run_dir / f"metrics_{partition}.csv").write_text(MX.report_to_csv(report))
    print(f"evaluate[{partition}]: auroc={_fmt(report.auroc)} "
          f"auprc={_fmt(report.auprc)} cslope={_fmt(report.calibration_slope)} "
          f"n={report.n} -> {run_dir}")
    return 0


def cmd_recalibrate(cfg: RunConfig) -> int:
    run_dir = _init_run_dir(cfg)
    split, _ = _load_split(cfg, run_dir)
    ckpt = _checkpoint_path(run_dir, cfg["ablation"])
    if not ckpt.exists():
        raise DataError(f"no checkpoint at {ckpt}; run 'train' first")
    params, mcfg = M.load_checkpoint(ckpt)
    vocab = _build_vocab(cfg, split, mcfg)
    preds1 = M.predict(params, split.test1, vocab, mcfg)
    preds2 = M.predict(params, split.test2, vocab, mcfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        recal = MX.recalibrate_fit(preds1)
        preds2_recal = MX.recalibrate_apply(recal, preds2)
        report_before = MX.compute_report(preds2, n_boot=cfg["n_bootstrap"],
                                          seed=cfg["seed"])
        report_after = MX.compute_report(preds2_recal, n_boot=cfg["n_bootstrap"],
                                         seed=cfg["seed"])
        curve_before = MX.calibration_curve(preds1)
    (run_dir / "recalibrator.json").write_text(json.dumps(
        {"intercept": recal.intercept, "slope": recal.slope}, sort_keys=True) + "\n")
    (run_dir / "calibration_test1_before.csv").write_text(MX.curve_to_csv(curve_before))
    (run_dir / "calibration_test2_after.csv").write_text(
        MX.curve_to_csv(report_after.curve))
    (run_dir / "metrics_test2_before_recal.json").write_text(
        MX.report_to_json(report_before))
    (run_dir / "metrics_test2_recalibrated.json").write_text(
        MX.report_to_json(report_after))
    (run_dir / "predictions_test2_recalibrated.csv").write_text(
        _predictions_csv(preds2_recal))
    print(f"recalibrate: a={recal.intercept:.4f} b={recal.slope:.4f} | test2 "
          f"slope {_fmt(report_before.calibration_slope)} -> "
          f"{_fmt(report_after.calibration_slope)}, auroc={_fmt(report_after.auroc)}")
    return 0


def cmd_stratify(cfg: RunConfig) -> int:
    run_dir = _init_run_dir(cfg)
    split, by_id = _load_split(cfg, run_dir)
    ckpt = _checkpoint_path(run_dir, cfg["ablation"])
    if not ckpt.exists():
        raise DataError(f"no checkpoint at {ckpt}; run 'train' first")
    params, mcfg = M.load_checkpoint(ckpt)
    vocab = _build_vocab(cfg, split, mcfg)
    preds = M.predict(params, split.test2, vocab, mcfg)
    recal_path = run_dir / "recalibrator.json"
    if recal_path.exists():
        doc = json.loads(recal_path.read_text())
        preds = MX.recalibrate_apply(
            MX.Recalibrator(intercept=doc["intercept"], slope=doc["slope"]), preds)
    attributes = {
        h.patient_id: MX.PatientAttributes(
            sex=h.demographics.sex,
            age_at_prediction=C.age_at(h.demographics,
                                       C.prediction_date(h, cfg["horizon_months"])),
            imd_quintile=h.demographics.imd_quintile)
        for h in split.test2}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        groups = MX.stratified_evaluation(preds, attributes)
        overall = MX.compute_report(preds)
    overall.subgroups = groups
    (run_dir / "stratified.json").write_text(MX.report_to_json(overall))
    (run_dir / "stratified.csv").write_text(MX.report_to_csv(overall, subgroup="all"))
    defined = sum(1 for g in groups.values() if g.defined)
    print(f"stratify: {len(groups)} subgroups ({defined} with defined AUROC) "
          f"-> {run_dir / 'stratified.csv'}")
    return 0


def cmd_baselines(cfg: RunConfig) -> int:
    """Train the comparison models on the matched set and evaluate them,
    recalibrated on Test 1, against Test 2."""
    run_dir = _init_run_dir(cfg)
    split, _ = _load_split(cfg, run_dir)
    mcfg = model_config(cfg)
    vocab = _build_vocab(cfg, split, mcfg)
    horizon = cfg["horizon_months"]
    seq_cfg = B.BaselineConfig(lr=cfg["lr"], batch_size=cfg["batch_size"],
                               max_epochs=cfg["max_epochs"], patience=cfg["patience"],
                               seed=cfg["seed"])
    rows = ["model,auroc,auroc_ci_low,auroc_ci_high,auprc,auprc_ci_low,auprc_ci_high"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fitted = {}
        for mode in ("demo", "codes", "both"):
            fitted[f"lr_{mode}"] = B.train_logistic_baseline(
                split.matched_train, vocab, mode=mode, horizon_months=horizon)
        for kind in ("rnn", "lstm"):
            fitted[kind] = B.sequence_baseline_train(split.matched_train, vocab,
                                                     kind, seq_cfg)
        for name, model in fitted.items():
            preds1 = model.predict(split.test1, vocab)
            preds2 = model.predict(split.test2, vocab)
            try:
                recal = MX.recalibrate_fit(preds1)
                preds2 = MX.recalibrate_apply(recal, preds2)
            except MX.MetricsError:
                pass
            report = MX.compute_report(preds2, n_boot=cfg["n_bootstrap"],
                                       seed=cfg["seed"])
            boot = report.bootstrap or {}
            roc = boot.get("auroc")
            prc = boot.get("auprc")
            rows.append(f"{name},{_fmt(report.auroc)},"
                        f"{_fmt(roc.ci_low if roc else None)},"
                        f"{_fmt(roc.ci_high if roc else None)},"
                        f"{_fmt(report.auprc)},"
                        f"{_fmt(prc.ci_low if prc else None)},"
                        f"{_fmt(prc.ci_high if prc else None)}")
            print(f"baseline[{name}]: auroc={_fmt(report.auroc)} "
                  f"auprc={_fmt(report.auprc)}")
    (run_dir / "baselines.csv").write_text("\n".join(rows) + "\n")
    print(f"baselines -> {run_dir / 'baselines.csv'}")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    run_dir = _init_run_dir(cfg)
    from .reporting import emit_report
    path = emit_report(cfg, run_dir)
    print(f"report -> {path}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_OVERRIDE_FLAGS = {
    "n": "n_patients",
    "seed": "seed",
    "out": "out_dir",
    "epochs": "max_epochs",
    "trials": "n_trials",
    "bootstrap": "n_bootstrap",
    "ablation": "ablation",
    "events": "events_path",
    "demographics": "demographics_path",
    "outcomes": "outcomes_path",
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="tgcnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    commands = {
        "generate": "synthesise a cohort and write the three CSVs",
        "prepare": "ingest, window, filter, split, and assign folds",
        "train": "fit one configuration; writes checkpoint and history",
        "cv": "5-fold cross-validation table",
        "search": "random hyperparameter search",
        "ablate": "train every ablation variant and write the combined table",
        "evaluate": "predictions and metrics for a partition",
        "recalibrate": "fit on Test 1, apply and evaluate on Test 2",
        "stratify": "subgroup metrics on Test 2",
        "baselines": "train and evaluate the comparison models",
        "report": "consolidated markdown/CSV bundle for a run directory",
    }
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a single config key")
        for flag, key in _OVERRIDE_FLAGS.items():
            p.add_argument(f"--{flag}", default=None, dest=f"flag_{flag}")
        if name == "evaluate":
            p.add_argument("--partition", default="test2",
                           choices=["train", "test1", "test2"])
    return parser


def _resolve(args) -> RunConfig:
    overrides: dict[str, str] = {}
    for flag, key in _OVERRIDE_FLAGS.items():
        value = getattr(args, f"flag_{flag}", None)
        if value is not None:
            overrides[key] = value
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    return load_config(args.config, overrides)


def cli_main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        cfg = _resolve(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "cv":
            return cmd_cv(cfg)
        if args.command == "search":
            return cmd_search(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.partition)
        if args.command == "recalibrate":
            return cmd_recalibrate(cfg)
        if args.command == "stratify":
            return cmd_stratify(cfg)
        if args.command == "baselines":
            return cmd_baselines(cfg)
        if args.command == "report":
            return cmd_report(cfg)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (DataError, ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TgcnnError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:  # console entry point
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
