"""MIDST-style experiment: model fleet, adversary views, attacks, scoring.

Experiment directory layout::

    spec.json                 effective RunConfig
    schema.json, encoder.json table schema and standardisation stats
    population.csv            record_id + schema columns
    models/<id>/checkpoint.bin    target denoiser (TMLP)
    models/<id>/meta.json         phase, schedule, architecture, training knobs
    models/<id>/synth.csv         synthetic dump (black-box material)
    models/<id>/challenge.csv     shuffled, unlabeled challenge queries
    models/<id>/split.json        train phase only: member/holdout manifest
    ground_truth/<id>.csv         record_id,is_member for the challenge queries
    ground_truth/splits/<id>.json manifest of every model
    scores/<track>.csv            model_id,record_id,score (dev + final)
    metrics.json, baselines.json, roc_*.csv, roc_*.svg
    logs/stages.json              effective seed and config hash per stage

Attack code only ever touches the directory through :class:`AdversaryView`,
which never opens ``ground_truth/`` and hides checkpoints on the black-box
track.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import attack as atk
from . import evaluation as ev
from .config import ChallengeSpec, RunConfig, derive_seed
from .diffusion import (
    DenoiserParams,
    TrainConfig,
    build_schedule,
    load_denoiser,
    sample,
    save_denoiser,
    train_denoiser,
)
from .tabular import (
    EncoderStats,
    SplitManifest,
    TableSchema,
    decode_rows,
    encode_rows,
    fit_encoder,
    generate_synthetic_population,
    make_splits,
    read_csv,
    write_csv,
)

log = logging.getLogger(__name__)


class ChallengeError(RuntimeError):
    def __init__(self, model_id, message):
        super().__init__(f"[{model_id}] {message}")
        self.model_id = model_id


class AccessDenied(PermissionError):
    pass


@dataclass
class ModelInstance:
    id: str
    phase: str
    checkpoint: Path
    meta: Path
    challenge: Path
    synth: Path
    split: Path | None = None


@dataclass
class ShadowModel:
    target_id: str
    params: DenoiserParams


@dataclass
class ChallengeArtifacts:
    root: Path
    instances: list[ModelInstance]
    ground_truth: dict[str, Path]
    views: list[str]
    scores: dict[str, Path] = field(default_factory=dict)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fit_one(args):
    """Worker entry: train one denoiser and optionally sample from it."""
    data, diff_cfg, seed, n_synth, synth_seed = args
    schedule = build_schedule(diff_cfg["T"], diff_cfg["beta_start"], diff_cfg["beta_end"])
    tc = TrainConfig(steps=diff_cfg["steps"], batch=diff_cfg["batch"], lr=diff_cfg["lr"], seed=seed,
                     hidden=list(diff_cfg["hidden"]), embed_dim=diff_cfg["embed_dim"])
    params, losses = train_denoiser(data, schedule, tc)
    synth = sample(params, schedule, n_synth, synth_seed) if n_synth else None
    return params, synth, float(losses[-50:].mean()) if len(losses) else None


def _map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def select_challenge(manifest: SplitManifest, n_queries: int, seed: int) -> tuple[list[str], list[int]]:
    """Balanced, shuffled challenge queries drawn from a model's manifest."""
    rng = np.random.default_rng(seed)
    half = n_queries // 2
    mem = [manifest.members[i] for i in sorted(rng.choice(len(manifest.members), half, replace=False))]
    hold = [manifest.holdout[i] for i in sorted(rng.choice(len(manifest.holdout), half, replace=False))]
    ids = mem + hold
    labels = [1] * half + [0] * half
    order = rng.permutation(len(ids))
    return [ids[i] for i in order], [labels[i] for i in order]


# ---------------------------------------------------------------------------
# fleet construction
# ---------------------------------------------------------------------------


@dataclass
class PopulationContext:
    schema: TableSchema
    stats: EncoderStats
    ids: list[str]
    rows: list[list]
    manifests: list[SplitManifest]

    def rows_for(self, ids) -> list[list]:
        lookup = dict(zip(self.ids, self.rows))
        return [lookup[r] for r in ids]


def _log_stage(root: Path, cfg: RunConfig, name: str, seed: int) -> None:
    path = root / "logs" / "stages.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    data = json.loads(path.read_text()) if path.exists() else {}
    data[name] = {"seed": seed, "config_hash": cfg.hash()}
    _write_json(path, data)


def prepare_population(cfg: RunConfig, root) -> PopulationContext:
    """Write spec, schema, encoder stats and the population; derive all splits."""
    root = Path(root)
    for sub in ("models", "ground_truth/splits", "scores", "logs"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "spec.json").write_text(cfg.to_json())
    spec = cfg.challenge
    schema = cfg.generator.schema
    n_rows = cfg.generator.n_rows or len(spec.model_ids()) * 2 * spec.members_per_model
    seed = derive_seed(cfg.master_seed, "population")
    rows = generate_synthetic_population(cfg.generator, seed, n_rows)
    ids = [f"r{i:06d}" for i in range(len(rows))]
    schema.save(root / "schema.json")
    stats = fit_encoder(schema, rows)
    _write_json(root / "encoder.json", stats.to_dict())
    write_csv(root / "population.csv", schema, rows, ids)
    _log_stage(root, cfg, "population", seed)
    split_seed = derive_seed(cfg.master_seed, "splits")
    manifests = make_splits(ids, spec, split_seed)
    _log_stage(root, cfg, "splits", split_seed)
    return PopulationContext(schema, stats, ids, rows, manifests)


def load_population(cfg: RunConfig, root) -> PopulationContext:
    """Re-read a population written by :func:`prepare_population`."""
    root = Path(root)
    schema = TableSchema.load(root / "schema.json")
    with open(root / "encoder.json") as fh:
        stats = EncoderStats.from_dict(json.load(fh))
    ids, rows = read_csv(root / "population.csv", schema)
    manifests = make_splits(ids, cfg.challenge, derive_seed(cfg.master_seed, "splits"))
    return PopulationContext(schema, stats, ids, rows, manifests)


def _target_job(cfg: RunConfig, ctx: PopulationContext, man: SplitManifest):
    data = encode_rows(ctx.schema, ctx.stats, ctx.rows_for(man.members))
    return (data, asdict(cfg.diffusion), derive_seed(cfg.master_seed, "target", man.model_id),
            cfg.challenge.n_synth, derive_seed(cfg.master_seed, "synth", man.model_id))


def _materialize(cfg: RunConfig, root: Path, ctx: PopulationContext, man: SplitManifest, job, result) -> ModelInstance:
    params, synth, final_loss = result
    spec = cfg.challenge
    mid = man.model_id
    phase = spec.phase_of(mid)
    mdir = root / "models" / mid
    mdir.mkdir(parents=True, exist_ok=True)
    meta = {
        "model_id": mid,
        "phase": phase,
        "T": cfg.diffusion.T,
        "beta_start": cfg.diffusion.beta_start,
        "beta_end": cfg.diffusion.beta_end,
        "seed": job[2],
        "training": {k: job[1][k] for k in ("hidden", "steps", "batch", "lr")},
    }
    inst = ModelInstance(mid, phase, mdir / "checkpoint.bin", mdir / "meta.json", mdir / "challenge.csv",
                         mdir / "synth.csv")
    save_denoiser(params, meta, inst.checkpoint, inst.meta)
    if synth is None or len(synth) != spec.n_synth:
        raise ChallengeError(mid, "synthetic dump has the wrong size")
    write_csv(inst.synth, ctx.schema, decode_rows(ctx.schema, ctx.stats, synth))
    q_seed = derive_seed(cfg.master_seed, "challenge", mid)
    q_ids, q_labels = select_challenge(man, spec.queries_for(phase), q_seed)
    write_csv(inst.challenge, ctx.schema, ctx.rows_for(q_ids), q_ids)
    gt = root / "ground_truth" / f"{mid}.csv"
    with open(gt, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "is_member"])
        for r, lab in sorted(zip(q_ids, q_labels)):
            w.writerow([r, lab])
    man.save(root / "ground_truth" / "splits" / f"{mid}.json")
    if phase == "train":
        inst.split = mdir / "split.json"
        man.save(inst.split)
    _log_stage(root, cfg, f"target/{mid}", job[2])
    _log_stage(root, cfg, f"synth/{mid}", job[4])
    _log_stage(root, cfg, f"challenge/{mid}", q_seed)
    log.info("%s: final train loss %.4f", mid, final_loss if final_loss is not None else float("nan"))
    return inst


def train_target(cfg: RunConfig, root, model_id: str) -> ModelInstance:
    """Train and materialise a single fleet member (population must exist)."""
    root = Path(root)
    ctx = load_population(cfg, root)
    man = next((m for m in ctx.manifests if m.model_id == model_id), None)
    if man is None:
        raise ChallengeError(model_id, "unknown model id")
    job = _target_job(cfg, ctx, man)
    try:
        result = _fit_one(job)
    except Exception as exc:
        raise ChallengeError(model_id, f"training failed: {exc}") from exc
    return _materialize(cfg, root, ctx, man, job, result)


def run_challenge(cfg: RunConfig, out_dir=None, workers: int | None = None, attacks: bool = True) -> ChallengeArtifacts:
    """Build the full experiment directory and (optionally) run every track."""
    root = Path(out_dir or cfg.out)
    workers = workers or cfg.workers
    ctx = prepare_population(cfg, root)
    jobs = [_target_job(cfg, ctx, man) for man in ctx.manifests]
    log.info("training %d target models", len(jobs))
    results = _map(_fit_one, jobs, workers)
    instances = []
    for man, job, res in zip(ctx.manifests, jobs, results):
        instances.append(_materialize(cfg, root, ctx, man, job, res))
    truth = {i.id: root / "ground_truth" / f"{i.id}.csv" for i in instances}
    arts = ChallengeArtifacts(root, instances, truth, list(cfg.challenge.tracks))
    if attacks:
        run_attacks(cfg, root, workers)
        arts.scores = {t: root / "scores" / f"{t}.csv" for t in cfg.challenge.tracks}
    return arts


# ---------------------------------------------------------------------------
# adversary view
# ---------------------------------------------------------------------------


class AdversaryView:
    """Everything an adversary on ``track`` may read, and nothing else.

    White-box: all checkpoints, train-phase manifests, challenge queries.
    Black-box: synthetic dumps, train-phase manifests, challenge queries.
    """

    def __init__(self, root, track: str):
        if track not in ("white_box", "black_box"):
            raise ValueError(f"unknown track {track!r}")
        self.root = Path(root)
        self.track = track
        with open(self.root / "spec.json") as fh:
            spec_obj = json.load(fh)
        self.spec = ChallengeSpec(**spec_obj["challenge"])
        self.schema = TableSchema.load(self.root / "schema.json")
        with open(self.root / "encoder.json") as fh:
            self.stats = EncoderStats.from_dict(json.load(fh))
        self._population = None

    @property
    def model_ids(self) -> list[str]:
        return self.spec.model_ids()

    def phase(self, mid: str) -> str:
        return self.spec.phase_of(mid)

    def ids_for(self, phase: str) -> list[str]:
        return self.spec.ids_for(phase)

    def _mdir(self, mid):
        return self.root / "models" / mid

    def meta(self, mid: str) -> dict:
        with open(self._mdir(mid) / "meta.json") as fh:
            return json.load(fh)

    def schedule(self, mid: str):
        m = self.meta(mid)
        return build_schedule(m["T"], m["beta_start"], m["beta_end"])

    def target(self, mid: str) -> DenoiserParams:
        if self.track != "white_box":
            raise AccessDenied("target weights are not visible on the black-box track")
        path = self._mdir(mid) / "checkpoint.bin"
        if not path.exists():
            raise ChallengeError(mid, "missing checkpoint")
        return load_denoiser(path, self._mdir(mid) / "meta.json")[0]

    def synthetic(self, mid: str) -> np.ndarray:
        if self.track != "black_box":
            raise AccessDenied("synthetic dumps belong to the black-box track")
        _, rows = read_csv(self._mdir(mid) / "synth.csv", self.schema)
        if not rows:
            raise ChallengeError(mid, "empty synthetic dump")
        return encode_rows(self.schema, self.stats, rows)

    def challenge(self, mid: str) -> tuple[list[str], np.ndarray]:
        ids, rows = read_csv(self._mdir(mid) / "challenge.csv", self.schema)
        return ids, encode_rows(self.schema, self.stats, rows)

    def _rows(self) -> dict:
        if self._population is None:
            ids, rows = read_csv(self.root / "population.csv", self.schema)
            self._population = dict(zip(ids, rows))
        return self._population

    def attack_training_rows(self, mid: str) -> tuple[list[str], np.ndarray, np.ndarray]:
        """Labelled rows of a train-phase model, excluding its challenge queries."""
        if self.phase(mid) != "train":
            raise AccessDenied(f"{mid}: training samples are only visible for train-phase models")
        man = SplitManifest.load(self._mdir(mid) / "split.json")
        held_out = set(self.challenge(mid)[0])
        ids, labels = [], []
        for r in man.members:
            if r not in held_out:
                ids.append(r)
                labels.append(1)
        for r in man.holdout:
            if r not in held_out:
                ids.append(r)
                labels.append(0)
        pop = self._rows()
        X = encode_rows(self.schema, self.stats, [pop[r] for r in ids])
        return ids, X, np.asarray(labels)


# ---------------------------------------------------------------------------
# attacks
# ---------------------------------------------------------------------------


def _feature_sets(view: AdversaryView, cfg: atk.AttackConfig, seed: int):
    d = view.schema.encoded_dim
    return atk.make_noise_set(cfg.n_eps, d, seed), atk.TimeSet(cfg.timesteps)


def _train_and_score(view: AdversaryView, models: dict, cfg: atk.AttackConfig, seed: int):
    """Shared tail of both tracks: features -> classifier -> dev/final scores."""
    noise_set, time_set = _feature_sets(view, cfg, derive_seed(seed, "noise_set"))
    train_ids = view.ids_for("train")
    split = atk.model_based_split(train_ids, derive_seed(seed, "model_split"), tuple(cfg.split_ratio))
    feats = {}
    for mid in train_ids:
        ids, X, y = view.attack_training_rows(mid)
        feats[mid] = atk.extract_features(models[mid], X, noise_set, time_set, view.schedule(mid), ids, mid, y)
    train_fm = atk.FeatureMatrix.concat([feats[m] for m in split["train"]])
    val_fm = atk.FeatureMatrix.concat([feats[m] for m in split["val"]])
    clf = atk.train_attack_classifier(train_fm, val_fm, cfg.hidden_widths, cfg.lrs, cfg.epochs,
                                      derive_seed(seed, "classifier"), cfg.eval_every)
    records = []
    for mid in view.ids_for("dev") + view.ids_for("final"):
        ids, X = view.challenge(mid)
        fm = atk.extract_features(models[mid], X, noise_set, time_set, view.schedule(mid), ids, mid)
        records.extend(atk.score_records(clf, fm))
    return records, clf, split


def build_whitebox_attack(view: AdversaryView, cfg: atk.AttackConfig, seed: int):
    """Loss-grid classifier on the targets' own weights.

    Returns:
        ``(score_records, classifier, model_split)``.
    """
    if view.track != "white_box":
        raise ValueError("white-box attack needs a white-box view")
    if len(view.ids_for("train")) < 2:
        raise atk.InsufficientModels("insufficient models: need at least 2 train-phase models")
    models = {mid: view.target(mid) for mid in view.model_ids}
    return _train_and_score(view, models, cfg, seed)


def train_shadow(view: AdversaryView, mid: str, seed: int) -> ShadowModel:
    """Fit a denoiser to ``mid``'s synthetic dump with the target's training knobs."""
    meta = view.meta(mid)
    tr = meta["training"]
    data = view.synthetic(mid)
    tc = TrainConfig(steps=tr["steps"], batch=tr["batch"], lr=tr["lr"], seed=seed, hidden=list(tr["hidden"]),
                     embed_dim=meta["embed_dim"])
    params, _ = train_denoiser(data, view.schedule(mid), tc)
    return ShadowModel(mid, params)


def _shadow_job(args):
    root, mid, seed = args
    return train_shadow(AdversaryView(root, "black_box"), mid, seed)


def build_blackbox_attack(view: AdversaryView, cfg: atk.AttackConfig, seed: int, workers: int = 1):
    """Shadow denoisers fitted to each synthetic dump stand in for the targets."""
    if view.track != "black_box":
        raise ValueError("black-box attack needs a black-box view")
    if len(view.ids_for("train")) < 2:
        raise atk.InsufficientModels("insufficient models: need at least 2 train-phase models")
    for mid in view.model_ids:
        view.synthetic(mid)  # fail fast on empty dumps
    jobs = [(view.root, mid, derive_seed(seed, "shadow", mid)) for mid in view.model_ids]
    shadows = _map(_shadow_job, jobs, workers)
    models = {s.target_id: s.params for s in shadows}
    records, clf, split = _train_and_score(view, models, cfg, seed)
    return records, clf, split, shadows


def write_scores(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_id", "record_id", "score"])
        for r in sorted(records, key=lambda r: (r.model_id, r.record_id)):
            w.writerow([r.model_id, r.record_id, f"{r.score:.6f}"])


def load_truth(root) -> dict[str, dict[str, int]]:
    root = Path(root)
    return {p.stem: ev.read_ground_truth(p) for p in sorted((root / "ground_truth").glob("*.csv"))}


def run_attacks(cfg: RunConfig, root, workers: int = 1) -> None:
    """Score every track, then evaluate against ground truth and write reports."""
    root = Path(root)
    for track in cfg.challenge.tracks:
        view = AdversaryView(root, track)
        seed = derive_seed(cfg.master_seed, "attack", track)
        if track == "white_box":
            records, clf, split = build_whitebox_attack(view, cfg.attack, seed)
        else:
            records, clf, split, _ = build_blackbox_attack(view, cfg.attack, seed, workers)
        _log_stage(root, cfg, f"attack/{track}", seed)
        write_scores(root / "scores" / f"{track}.csv", records)
        clf.save(root / "scores" / f"{track}_classifier.bin")
        _write_json(root / "scores" / f"{track}_split.json", split)
    evaluate_experiment(cfg, root)


# ---------------------------------------------------------------------------
# evaluation (reads ground truth; never called by attack code)
# ---------------------------------------------------------------------------


def _pooled_reports(prefix, tab: ev.ScoreTable, spec: ChallengeSpec, levels, curves=None, per_model=True):
    out = []
    for phase in ("dev", "final"):
        ids = spec.ids_for(phase)
        sub = tab.subset(ids)
        if not sub.scores:
            continue
        rid = f"{prefix}/{phase}"
        out.append(ev.metric_report(rid, sub.scores, sub.labels, levels))
        if curves is not None:
            curves[rid.replace("/", "_")] = ev.compute_roc(sub.scores, sub.labels)
        if per_model:
            for mid in ids:
                m = tab.subset([mid])
                out.append(ev.metric_report(f"{prefix}/{mid}", m.scores, m.labels, levels))
    return out


def evaluate_experiment(cfg: RunConfig, root) -> list[ev.MetricReport]:
    root = Path(root)
    truth = load_truth(root)
    levels = cfg.evaluation.fpr_levels
    reports, curves, figures = [], {}, {}
    for track in cfg.challenge.tracks:
        tab = ev.join_scores(ev.read_scores(root / "scores" / f"{track}.csv"), truth)
        before = set(curves)
        reports += _pooled_reports(track, tab, cfg.challenge, levels, curves)
        figures[track] = sorted(set(curves) - before)
    ev.emit_report(reports, curves, root, figures)
    if cfg.baselines and "white_box" in cfg.challenge.tracks:
        base = compare_methods(cfg, root)
        _write_json_list(root / "baselines.json", [r.to_dict() for r in base])
    return reports


def _write_json_list(path, items):
    Path(path).write_text(json.dumps(items, indent=2) + "\n")


def compare_methods(cfg: RunConfig, root, phases=("dev", "final"), zero_noise_index: int = 0) -> list[ev.MetricReport]:
    """White-box reference methods scored on the same challenge queries.

    Naive loss at each ``naive_timesteps`` entry (one fixed noise), SecMI
    t-error, and the label-peeking best-noise reference. Reported ids look
    like ``white_box/naive_t20/dev``.
    """
    root = Path(root)
    view = AdversaryView(root, "white_box")
    truth = load_truth(root)
    a = cfg.attack
    d = view.schema.encoded_dim
    eps0 = atk.make_noise_set(1, d, derive_seed(cfg.master_seed, "naive_noise")).noises[zero_noise_index]
    candidates = atk.make_noise_set(a.best_noise_candidates, d, derive_seed(cfg.master_seed, "best_noise")).noises
    levels = cfg.evaluation.fpr_levels
    tables: dict[str, ev.ScoreTable] = {}

    def add(method, mid, rids, scores, labels):
        tab = tables.setdefault(method, ev.ScoreTable())
        tab.model_ids += [mid] * len(rids)
        tab.record_ids += list(rids)
        tab.scores += [float(s) for s in scores]
        tab.labels += list(labels)

    for phase in phases:
        for mid in view.ids_for(phase):
            model = view.target(mid)
            sched = view.schedule(mid)
            rids, X = view.challenge(mid)
            y = np.array([truth[mid][r] for r in rids])
            for t in a.naive_timesteps:
                add(f"naive_t{t}", mid, rids, atk.naive_membership_scores(model, X, eps0, t, sched), y)
            add(f"secmi_t{a.secmi_t}", mid, rids,
                atk.secmi_membership_scores(model, X, a.secmi_t, sched, a.secmi_stride, a.secmi_fresh_eps), y)
            for t in a.best_noise_timesteps:
                aucs, best = atk.best_noise_oracle(model, X, y, candidates, t, sched)
                add(f"best_noise_t{t}", mid, rids, atk.naive_membership_scores(model, X, candidates[best], t, sched), y)
    reports = []
    for method in tables:
        reports += _pooled_reports(f"white_box/{method}", tables[method], cfg.challenge, levels, per_model=False)
    return reports
