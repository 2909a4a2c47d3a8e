"""Stage functions and the on-disk command chain.

The in-memory functions (``build_data`` ... ``run_seed``) are what the
commands call; every command reads its inputs from disk, so a chain of
commands and a rerun of any single command see the same bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffusion, face, fvd, kb as kbmod, policy, recognition, rewards, tensor_io, video
from .config import PipelineConfig
from .labels import AU_IDS, EMOTIONS, N_IDENTITY

logger = logging.getLogger(__name__)

_STREAMS = {"data": 1, "train_prompts": 2, "denoiser": 3, "prompts": 4, "policy": 5, "random_policy": 6,
            "policy_eval": 7}

ARMS = ("step_only", "quality", "face_expr", "full")


def stream(seed: int, name: str):
    return np.random.default_rng([int(seed), _STREAMS[name]])


def domain_config(cfg: PipelineConfig) -> face.DomainConfig:
    d = cfg.domain
    scarce = set(d.scarce)
    return face.DomainConfig(
        n_identities=d.n_identities,
        train_counts={e: (d.train_scarce if e in scarce else d.train_non_scarce) for e in EMOTIONS},
        test_counts={e: d.test_per_class for e in EMOTIONS},
        M=d.M, H=d.H, W=d.W, jitter=d.jitter, peak_range=tuple(d.peak_range))


def load_kb(cfg: PipelineConfig):
    if cfg.kb == "default":
        return kbmod.default_knowledge_base()
    with open(cfg.kb, encoding="utf-8") as fh:
        return kbmod.kb_from_json(json.load(fh))


def sampler_config(cfg: PipelineConfig, M: int | None = None) -> video.SamplerConfig:
    s = cfg.sampler
    return video.SamplerConfig(M=M or cfg.domain.M, K_q=s.K_q, U=s.U, g_min=s.g_min, g_max=s.g_max,
                               clip_x0=s.clip_x0, H=cfg.domain.H, W=cfg.domain.W)


def reward_config(cfg: PipelineConfig, arm: str = "full") -> rewards.RewardConfig:
    flags = {"step_only": (False, False), "quality": (True, False), "face_expr": (False, True),
             "full": (True, True)}[arm]
    r = cfg.reward
    return rewards.RewardConfig(r.lam, r.gamma, r.k, flags[0], flags[1], tuple(cfg.grids.S_T))


def rl_config(cfg: PipelineConfig) -> policy.RLConfig:
    r = cfg.rl
    return policy.RLConfig(lr=r.lr, batch_size=r.batch_size, pool_size=r.pool_size, max_iters=r.max_iters,
                           val_every=r.val_every, patience=r.patience, tol=r.tol, train_fraction=r.train_fraction)


def build_schedule(cfg: PipelineConfig):
    s = cfg.schedule
    return diffusion.build_schedule(s.T_max, s.beta_start, s.beta_end)


# --------------------------------------------------------------------------
# in-memory stages


def synth_data(cfg: PipelineConfig):
    return face.synthesize_dataset(domain_config(cfg), stream(cfg.seed, "data"))


def training_conditions(cfg, d1, x_v, knowledge):
    """Text embedding and identity reference per training clip."""
    refs = {x.identity_id: x.latent for x in x_v}
    patterns = face.class_patterns(knowledge)
    rng = stream(cfg.seed, "train_prompts")
    train = d1.split("train")
    conds, references = [], []
    for clip in train.clips:
        ident = d1.identities[clip.identity_id]
        if clip.label in cfg.domain.scarce:
            p = kbmod.make_prompt(clip.identity_id, ident, clip.label, knowledge, 2, rng)
        else:
            pat = {au: float(patterns[clip.label][i]) for i, au in enumerate(AU_IDS)}
            p = kbmod.pattern_prompt(clip.identity_id, ident, clip.label, pat)
        conds.append(p.c)
        # identities without a usable neutral frame fall back to the clip's own first frame
        references.append(refs.get(clip.identity_id, clip.latents[0]))
    return train, conds, references


def train_generator(cfg, d1, x_v, knowledge):
    train, conds, refs = training_conditions(cfg, d1, x_v, knowledge)
    data = video.build_training_set(train.clips, conds, refs, cfg.sampler.K_q)
    d = cfg.denoiser
    tc = diffusion.DenoiserTrainConfig(epochs=d.epochs, lr=d.lr, batch_size=d.batch_size,
                                       cond_dropout=d.cond_dropout, hidden=tuple(d.hidden))
    return diffusion.train_denoiser(data, build_schedule(cfg), tc, stream(cfg.seed, "denoiser"))


def make_prompts(cfg, x_v, knowledge):
    return kbmod.build_prompt_set([(x.identity_id, x.latent) for x in x_v], knowledge, stream(cfg.seed, "prompts"),
                                  tuple(cfg.domain.scarce))


def prompt_pairs(prompts, x_v):
    refs = {x.identity_id: x.latent for x in x_v}
    return [policy.Pair(np.asarray(refs[p.identity_id], dtype=float), np.asarray(p.c, dtype=float), p.emotion,
                        p.identity_id, p.text) for p in prompts]


def a_max_value(cfg, d1) -> float:
    if cfg.reward.a_max != "auto":
        return float(cfg.reward.a_max)
    frames = [c.latents[:, N_IDENTITY:] for c in d1.clips if c.split == "train" and c.label in cfg.domain.scarce]
    return rewards.amplitude_ceiling(np.concatenate(frames) if frames else None)


def real_scarce(cfg, d1):
    return [c for c in d1.clips if c.label in cfg.domain.scarce]


def fvd_summary(real_clips, gen_clips):
    rf = np.array([fvd.featurize_clip(c.frames) for c in real_clips])
    gf = np.array([fvd.featurize_clip(c.frames) for c in gen_clips])
    overall = fvd.fvd(rf, gf)
    by_subject = fvd.grouped_fvd(fvd.group_features(rf, [c.identity_id for c in real_clips]),
                                 fvd.group_features(gf, [c.identity_id for c in gen_clips]))
    by_text = fvd.grouped_fvd(fvd.group_features(rf, [c.label for c in real_clips]),
                              fvd.group_features(gf, [c.label for c in gen_clips]))
    return {"fvd": overall, "sfvd": by_subject.mean, "sfvd_std": by_subject.std,
            "tfvd": by_text.mean, "tfvd_std": by_text.std, "n_real": len(real_clips), "n_gen": len(gen_clips)}


def greedy_actions(params, pairs):
    c = np.array([p.c for p in pairs])
    r = np.array([p.x0 for p in pairs])
    d = policy.policy_forward(policy.encode_state(c, r, params), params)
    return [policy.select_action_greedy(policy.PolicyDists(d.p_T[j], d.p_a[j], d.p_b[j])) for j in range(len(pairs))]


@dataclass
class SeedResult:
    seed: int
    fvd: dict = field(default_factory=dict)  # arm -> FVD of its D_3 (plus "random")
    actions: dict = field(default_factory=dict)  # arm -> histogram over S_T
    composite: dict = field(default_factory=dict)  # "learned"/"random" -> mean audited composite
    iterations: dict = field(default_factory=dict)
    recognition: list = field(default_factory=list)
    recognition_rows: list = field(default_factory=list)
    test_hashes: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def to_json(self):
        return {"seed": self.seed, "fvd": self.fvd, "actions": self.actions, "composite": self.composite,
                "iterations": self.iterations, "recognition": self.recognition,
                "recognition_rows": self.recognition_rows, "test_hashes": self.test_hashes,
                "timings": self.timings}


def mean_audited_composite(cfg, c, r, fn, params, arm="full"):
    return policy.evaluate_policy(c, r, fn, params, reward_config(cfg, arm), stream(cfg.seed, "policy_eval"),
                                  pools_per_pair=32, pool_size=cfg.rl.pool_size)


def run_seed(cfg: PipelineConfig, arms=ARMS, recognition_arms=("full", "random")) -> SeedResult:
    """Everything the directional experiments need for one seed, without touching disk."""
    res = SeedResult(cfg.seed)
    t0 = time.perf_counter()
    knowledge = load_kb(cfg)
    d1 = synth_data(cfg)
    _, _, _, x_v = face.partition_dataset(d1.split("train"), tuple(cfg.domain.scarce))
    res.timings["data"] = time.perf_counter() - t0
    t = time.perf_counter()
    theta, _ = train_generator(cfg, d1, x_v, knowledge)
    sched = build_schedule(cfg)
    res.timings["denoiser"] = time.perf_counter() - t
    t = time.perf_counter()
    prompts, _ = make_prompts(cfg, x_v, knowledge)
    pairs = prompt_pairs(prompts, x_v)
    table = policy.reward_table(pairs, theta, sched, cfg.seed, a_max_value(cfg, d1), cfg.sampler.M_score,
                                sampler_config(cfg))
    fn = policy.table_reward_fn(table)
    res.timings["reward_table"] = time.perf_counter() - t
    t = time.perf_counter()
    c = np.array([p.c for p in pairs])
    r = np.array([p.x0 for p in pairs])
    real = real_scarce(cfg, d1)
    cfg_s = sampler_config(cfg)
    d3 = {}
    rand = policy.random_actions(len(pairs), stream(cfg.seed, "random_policy"))
    d3["random"] = policy.adaptive_generate(pairs, None, theta, sched, cfg.seed, cfg_s, actions=rand)[0]
    res.fvd["random"] = fvd.fvd(*(_feats(real), _feats(d3["random"].clips)))
    res.actions["random"] = _t_hist(rand)
    generated = {}
    for arm in arms:
        params, log, _ = policy.train_policy(c, r, fn, reward_config(cfg, arm), rl_config(cfg),
                                                 stream(cfg.seed, "policy"))
        acts = greedy_actions(params, pairs)
        key = tuple(u.index for u in acts)
        if key not in generated:
            generated[key] = policy.adaptive_generate(pairs, None, theta, sched, cfg.seed, cfg_s, actions=acts)[0]
        d3[arm] = generated[key]
        res.fvd[arm] = fvd.fvd(_feats(real), _feats(d3[arm].clips))
        res.actions[arm] = _t_hist(acts)
        res.iterations[arm] = len(log.rows)
        if arm == "full":
            res.composite["learned"] = mean_audited_composite(cfg, c, r, fn, params)
            res.composite["random"] = mean_audited_composite(cfg, c, r, fn, None)
    res.timings["policy"] = time.perf_counter() - t
    if recognition_arms:
        t = time.perf_counter()
        train, test = d1.split("train"), d1.split("test")
        augmented = {f"+d3_{a}": d3[a] for a in recognition_arms if a in d3}
        rows, summary = recognition.augmentation_experiment([(cfg.seed, train, test, augmented)],
                                                            _classifier_config(cfg))
        res.recognition = summary
        res.recognition_rows = [_row_json(row) for row in rows]
        res.test_hashes = sorted({row.test_hash for row in rows})
        res.timings["recognition"] = time.perf_counter() - t
    res.timings["total"] = time.perf_counter() - t0
    return res


def _feats(clips):
    return np.array([fvd.featurize_clip(c.frames) for c in clips])


def _t_hist(actions):
    return [int(v) for v in np.bincount([policy.S_T.index(u.T) for u in actions], minlength=len(policy.S_T))]


def _classifier_config(cfg):
    k = cfg.classifier
    return recognition.ClassifierConfig(lr=k.lr, epochs=k.epochs, l2=k.l2)


def _row_json(row: recognition.ArmResult):
    return {"arm": row.arm, "seed": row.seed, "war": row.metrics.war, "uar": row.metrics.uar,
            "per_class": row.metrics.per_class, "test_hash": row.test_hash, "n_train": row.n_train}


# --------------------------------------------------------------------------
# on-disk command chain


class PrerequisiteError(RuntimeError):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n").encode()


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in row])
    return buf.getvalue().encode()


# stage -> (directory, files it must produce)
STAGES = {
    "synth-data": ("data", ["d1_latents.argt", "identities.argt", "d1_index.json"]),
    "select-frames": ("frames", ["x_v.json", "x_v_latents.argt"]),
    "build-kb": ("kb", ["kb.json"]),
    "make-prompts": ("prompts", ["prompts.json", "c.argt"]),
    "train-denoiser": ("denoiser", ["theta.json", "theta.argt", "train_log.csv"]),
    "train-policy": ("policy", ["reward_table.argt", "policy.json", "policy.argt", "train_log.csv"]),
    "generate": ("generate", ["d3_latents.argt", "d3.json", "d3_random_latents.argt", "d3_random.json"]),
    "eval-fvd": ("fvd", ["fvd.json"]),
    "recognize": ("recognize", ["report.json", "report.csv"]),
    "report": ("report", ["report.json"]),
}
ORDER = list(STAGES)


def _flatten(weights: dict):
    keys = sorted(weights)
    flat = np.concatenate([np.asarray(weights[k], dtype=float).ravel() for k in keys])
    shapes = {k: list(np.shape(weights[k])) for k in keys}
    return flat, keys, shapes


def _unflatten(flat, keys, shapes):
    out, pos = {}, 0
    for k in keys:
        n = int(np.prod(shapes[k])) if shapes[k] else 1
        out[k] = np.asarray(flat[pos:pos + n], dtype=float).reshape(shapes[k])
        pos += n
    if pos != len(flat):
        raise ValueError("parameter blob size does not match its shapes")
    return out


class Pipeline:
    """Commands reading and writing under ``out``; each stage owns one directory."""

    def __init__(self, cfg: PipelineConfig, out, jobs: int = 1):
        self.cfg = cfg
        self.out = Path(out)
        self.jobs = jobs  # accepted as a hint; the stages run single-threaded

    # ---------------- helpers
    def path(self, stage, name) -> Path:
        return self.out / STAGES[stage][0] / name

    def require(self, stage, *names):
        names = names or STAGES[stage][1]
        for n in names:
            p = self.path(stage, n)
            if not p.is_file():
                raise PrerequisiteError(f"missing {p}; run `argen {stage}` first")
        return [self.path(stage, n) for n in names]

    def _write(self, stage, name, data: bytes):
        tensor_io.atomic_write_bytes(self.path(stage, name), data)

    def _write_tensor(self, stage, name, arr):
        self._write(stage, name, tensor_io.dumps(arr))

    def _finish(self, stage, inputs, summary: str):
        outputs = {f"{STAGES[stage][0]}/{n}": sha256_file(self.path(stage, n)) for n in STAGES[stage][1]}
        ins = {str(p.relative_to(self.out)): sha256_file(p) for p in inputs}
        manifest = {"command": stage, "config_digest": self.cfg.digest(), "seed": self.cfg.seed,
                    "inputs": ins, "outputs": outputs, "summary": summary}
        self._write(stage, "manifest.json", _json_bytes(manifest))
        return summary

    def _read_json(self, stage, name):
        return json.loads(self.path(stage, name).read_text())

    # ---------------- loaders
    def load_d1(self):
        inputs = self.require("synth-data")
        lat = tensor_io.read(inputs[0]).astype(float)
        ident = tensor_io.read(inputs[1]).astype(float)
        index = json.loads(inputs[2].read_text())
        d = self.cfg.domain
        clips = []
        for row, z in zip(index["clips"], lat):
            frames = np.stack([face.render_latent(f, d.H, d.W) for f in z])
            clips.append(face.ClipRecord(row["clip_id"], row["label"], row["identity_id"], row["split"], z, frames,
                                         row["peak"]))
        return face.EmotionDataset(clips, ident), inputs

    def load_x_v(self):
        inputs = self.require("select-frames")
        rows = json.loads(inputs[0].read_text())["references"]
        lat = tensor_io.read(inputs[1]).astype(float)
        d = self.cfg.domain
        return [face.IdentityReference(r["identity_id"], r["clip_id"], r["frame_index"], z,
                                       face.render_latent(z, d.H, d.W)) for r, z in zip(rows, lat)], inputs

    def load_kb(self):
        inputs = self.require("build-kb")
        return kbmod.kb_from_json(json.loads(inputs[0].read_text())), inputs

    def load_prompts(self):
        inputs = self.require("make-prompts")
        rows = json.loads(inputs[0].read_text())["prompts"]
        c = tensor_io.read(inputs[1]).astype(float)
        return [kbmod.Prompt(r["text"], r["emotion"], r["identity_id"], r["record_ids"], cc)
                for r, cc in zip(rows, c)], inputs

    def load_theta(self):
        inputs = self.require("train-denoiser", "theta.json", "theta.argt")
        meta = json.loads(inputs[0].read_text())
        weights = _unflatten(tensor_io.read(inputs[1]), meta["keys"], meta["shapes"])
        theta = diffusion.DenoiserParams(weights, meta["d_z"], meta["d_c"], meta["d_ctx"], tuple(meta["hidden"]),
                                         meta["T_max"])
        return theta, inputs

    def load_policy(self):
        inputs = self.require("train-policy", "policy.json", "policy.argt")
        meta = json.loads(inputs[0].read_text())
        return policy.PolicyParams(_unflatten(tensor_io.read(inputs[1]), meta["keys"], meta["shapes"])), inputs

    def load_d3(self, name="d3"):
        inputs = self.require("generate", f"{name}_latents.argt", f"{name}.json")
        lat = tensor_io.read(inputs[0]).astype(float)
        rows = json.loads(inputs[1].read_text())["clips"]
        d = self.cfg.domain
        clips = [face.ClipRecord(r["clip_id"], r["label"], r["identity_id"], "aug", z,
                                 np.stack([face.render_latent(f, d.H, d.W) for f in z]), r["peak"])
                 for r, z in zip(rows, lat)]
        return face.EmotionDataset(clips, np.zeros((0, N_IDENTITY))), inputs

    def pairs(self):
        x_v, in_x = self.load_x_v()
        prompts, in_p = self.load_prompts()
        return prompt_pairs(prompts, x_v), in_x + in_p

    # ---------------- commands
    def synth_data(self):
        d1 = synth_data(self.cfg)
        self._write_tensor("synth-data", "d1_latents.argt", np.stack([c.latents for c in d1.clips]))
        self._write_tensor("synth-data", "identities.argt", d1.identities)
        index = {"clips": [{"clip_id": c.clip_id, "label": c.label, "identity_id": c.identity_id,
                            "split": c.split, "peak": c.peak} for c in d1.clips]}
        self._write("synth-data", "d1_index.json", _json_bytes(index))
        n_train = len(d1.split("train"))
        return self._finish("synth-data", [], f"synth-data: {len(d1)} clips (train {n_train}, "
                                              f"test {len(d1) - n_train})")

    def select_frames(self):
        d1, inputs = self.load_d1()
        d_ns, d_s, d_ne, x_v = face.partition_dataset(d1.split("train"), tuple(self.cfg.domain.scarce))
        refs = [{"identity_id": x.identity_id, "clip_id": x.clip_id, "frame_index": x.frame_index} for x in x_v]
        self._write("select-frames", "x_v.json", _json_bytes({"references": refs, "n_non_scarce": len(d_ns),
                                                               "n_scarce": len(d_s), "n_neutral": len(d_ne)}))
        self._write_tensor("select-frames", "x_v_latents.argt", np.stack([x.latent for x in x_v]))
        return self._finish("select-frames", inputs, f"select-frames: {len(x_v)} identity references from "
                                                     f"{len(d_ne)} neutral clips")

    def build_kb(self):
        knowledge = load_kb(self.cfg)
        self._write("build-kb", "kb.json", _json_bytes(kbmod.kb_to_json(knowledge)))
        extra = [Path(self.cfg.kb)] if self.cfg.kb != "default" else []
        return self._finish("build-kb", extra, f"build-kb: {len(knowledge)} records")

    def make_prompts(self):
        x_v, in_x = self.load_x_v()
        knowledge, in_k = self.load_kb()
        prompts, errors = make_prompts(self.cfg, x_v, knowledge)
        rows = [{k: v for k, v in p.to_json().items() if k != "c"} for p in prompts]
        self._write("make-prompts", "prompts.json", _json_bytes({"prompts": rows, "errors": errors}))
        self._write_tensor("make-prompts", "c.argt", np.stack([p.c for p in prompts]))
        return self._finish("make-prompts", in_x + in_k, f"make-prompts: {len(prompts)} prompts, "
                                                         f"{len(errors)} failures")

    def train_denoiser(self):
        d1, in_d = self.load_d1()
        x_v, in_x = self.load_x_v()
        knowledge, in_k = self.load_kb()
        theta, history = train_generator(self.cfg, d1, x_v, knowledge)
        flat, keys, shapes = _flatten(theta.weights)
        self._write_tensor("train-denoiser", "theta.argt", flat)
        meta = {"keys": keys, "shapes": shapes, "d_z": theta.d_z, "d_c": theta.d_c, "d_ctx": theta.d_ctx,
                "hidden": list(theta.hidden), "T_max": theta.T_max}
        self._write("train-denoiser", "theta.json", _json_bytes(meta))
        self._write("train-denoiser", "train_log.csv", _csv_bytes(["epoch", "loss"], list(enumerate(history))))
        final = history[-1] if history else float("nan")
        return self._finish("train-denoiser", in_d + in_x + in_k,
                            f"train-denoiser: {len(history)} epochs, final loss {final:.6f}")

    def train_policy(self):
        d1, in_d = self.load_d1()
        pairs, in_p = self.pairs()
        theta, in_t = self.load_theta()
        sched = build_schedule(self.cfg)
        table = policy.reward_table(pairs, theta, sched, self.cfg.seed, a_max_value(self.cfg, d1),
                                    self.cfg.sampler.M_score, sampler_config(self.cfg))
        self._write_tensor("train-policy", "reward_table.argt", table)
        c = np.array([p.c for p in pairs])
        r = np.array([p.x0 for p in pairs])
        params, log, split = policy.train_policy(c, r, policy.table_reward_fn(table), reward_config(self.cfg),
                                                 rl_config(self.cfg), stream(self.cfg.seed, "policy"))
        flat, keys, shapes = _flatten(params.weights)
        self._write_tensor("train-policy", "policy.argt", flat)
        meta = {"keys": keys, "shapes": shapes, "grids": {"S_T": list(policy.S_T), "S_a": list(policy.S_A),
                                                          "S_b": list(policy.S_B)},
                "seed": self.cfg.seed, "iterations": len(log.rows), "best_iteration": log.best_iteration,
                "best_val_reward": log.best_val, "converged": log.converged,
                "train_pairs": [int(i) for i in split[0]], "val_pairs": [int(i) for i in split[1]],
                "a_max": a_max_value(self.cfg, d1)}
        self._write("train-policy", "policy.json", _json_bytes(meta))
        self._write("train-policy", "train_log.csv", log.to_csv().encode())
        return self._finish("train-policy", in_d + in_p + in_t,
                            f"train-policy: {len(log.rows)} iterations, best val reward {log.best_val:.6f} "
                            f"at {log.best_iteration}")

    def generate(self):
        params, in_pol = self.load_policy()
        pairs, in_p = self.pairs()
        theta, in_t = self.load_theta()
        sched = build_schedule(self.cfg)
        cfg_s = sampler_config(self.cfg)
        summaries = []
        rand = policy.random_actions(len(pairs), stream(self.cfg.seed, "random_policy"))
        for name, acts in (("d3", greedy_actions(params, pairs)), ("d3_random", rand)):
            ds, records = policy.adaptive_generate(pairs, None, theta, sched, self.cfg.seed, cfg_s, actions=acts,
                                                   prefix=f"{name}-")
            lat = (np.stack([c.latents for c in ds.clips]) if ds.clips
                   else np.zeros((0, cfg_s.M, theta.d_z)))
            self._write_tensor("generate", f"{name}_latents.argt", lat)
            by_pair = {int(c.clip_id.rsplit("-", 1)[1]): c for c in ds.clips}
            rows = [{"clip_id": by_pair[i].clip_id, "label": by_pair[i].label,
                     "identity_id": by_pair[i].identity_id, "peak": by_pair[i].peak} for i in sorted(by_pair)]
            recs = [{"pair": rec.pair_index, "T": rec.action.T, "a": rec.action.a, "b": rec.action.b,
                     "clamp_count": rec.clamp_count, "error": rec.error} for rec in records]
            self._write("generate", f"{name}.json", _json_bytes({"clips": rows, "records": recs}))
            summaries.append(f"{name} {len(ds)} clips T-hist {_t_hist(acts)}")
        return self._finish("generate", in_p + in_t + in_pol, "generate: " + "; ".join(summaries))

    def eval_fvd(self):
        d1, in_d = self.load_d1()
        learned, in_g = self.load_d3("d3")
        rand, in_r = self.load_d3("d3_random")
        real = real_scarce(self.cfg, d1)
        report = {"learned": fvd_summary(real, learned.clips), "random": fvd_summary(real, rand.clips)}
        self._write("eval-fvd", "fvd.json", _json_bytes(report))
        return self._finish("eval-fvd", in_d + in_g + in_r,
                            f"eval-fvd: learned {report['learned']['fvd']:.6f}, random {report['random']['fvd']:.6f}")

    def recognize(self):
        d1, in_d = self.load_d1()
        learned, in_g = self.load_d3("d3")
        rand, in_r = self.load_d3("d3_random")
        rows, summary = recognition.augmentation_experiment(
            [(self.cfg.seed, d1.split("train"), d1.split("test"), {"+d3": learned, "+d3_random": rand})],
            _classifier_config(self.cfg))
        report = {"rows": [_row_json(r) for r in rows], "deltas": summary}
        self._write("recognize", "report.json", _json_bytes(report))
        header = ["arm", "seed", "war", "uar"] + [f"recall_{e}" for e in EMOTIONS]
        csv_rows = [[r.arm, r.seed, r.metrics.war, r.metrics.uar] + [r.metrics.per_class[e] for e in EMOTIONS]
                    for r in rows]
        self._write("recognize", "report.csv", _csv_bytes(header, csv_rows))
        d = summary[0]
        return self._finish("recognize", in_d + in_g + in_r,
                            f"recognize: dWAR {d['delta_war']:+.4f} dUAR {d['delta_uar']:+.4f} "
                            f"dScarce {d['delta_scarce']:+.4f}")

    def report(self):
        chain = self.verify_chain()
        fvd_rep = json.loads(self.require("eval-fvd")[0].read_text())
        rec = json.loads(self.require("recognize", "report.json")[0].read_text())
        out = {"config_digest": self.cfg.digest(), "seed": self.cfg.seed, "fvd": fvd_rep,
               "recognition": rec["deltas"], "chain": chain}
        self._write("report", "report.json", _json_bytes(out))
        inputs = [self.path(s, "manifest.json") for s in ORDER if s != "report"]
        return self._finish("report", inputs, f"report: chain of {len(chain)} stages verified")

    def verify_chain(self):
        """Check every stage's recorded hashes against the files on disk."""
        produced = {}
        checked = []
        for stage in ORDER:
            if stage == "report":
                continue
            mpath = self.path(stage, "manifest.json")
            if not mpath.is_file():
                raise PrerequisiteError(f"missing {mpath}; run `argen {stage}` first")
            m = json.loads(mpath.read_text())
            for rel, digest in m["outputs"].items():
                if sha256_file(self.out / rel) != digest:
                    raise RuntimeError(f"{rel} does not match the hash recorded by `{stage}`")
                produced[rel] = digest
            for rel, digest in m["inputs"].items():
                if rel in produced and produced[rel] != digest:
                    raise RuntimeError(f"`{stage}` consumed a different {rel} than is on disk")
            if m["config_digest"] != self.cfg.digest():
                raise RuntimeError(f"`{stage}` was produced with a different config")
            checked.append(stage)
        return checked

    def run(self, name: str):
        if name == "all":
            return [self.run(s) for s in ORDER]
        method = {s: getattr(self, s.replace("-", "_")) for s in ORDER}.get(name)
        if method is None:
            raise ValueError(f"unknown command {name!r}; choose from {ORDER + ['all']}")
        summary = method()
        print(summary, flush=True)
        return summary
