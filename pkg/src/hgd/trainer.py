"""Two-stage translation training, checkpointing and inference."""
from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .config import RunConfig
from .data import ImageSlice, LabelMap, downsample_labels
from .evaluator import ToySegmenter, class_scores, psnr, ssim
from .memory_bank import MemoryBank, build_bank, combine, read_map, update
from .networks import ModelBundle, load_state_arrays, write_npz

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", *L.TERM_WEIGHTS, "total", "disc"]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, breakdown: dict):
        super().__init__(f"non-finite loss at step {step}: {json.dumps(breakdown)}")
        self.step = step
        self.breakdown = breakdown


@dataclass
class Batch:
    m_i: torch.Tensor            # (1, 1, H, W)
    labels_i: torch.Tensor | None  # (h, w) at content resolution
    m_j: torch.Tensor
    labels_j: torch.Tensor | None
    modalities: tuple[int, int] = (0, 1)


@dataclass
class TrainState:
    config: RunConfig
    models: ModelBundle
    bank: MemoryBank
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: np.random.Generator
    torch_gen: torch.Generator
    step: int = 0
    segmenters: dict[int, list[float]] = field(default_factory=dict)
    hooks: list[Callable[[str, "TrainState"], None]] = field(default_factory=list)

    def _emit(self, event: str) -> None:
        for hook in self.hooks:
            hook(event, self)


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    # NaN-filling fresh buffers costs more than the convolutions at toy scale
    torch.utils.deterministic.fill_uninitialized_memory = False


def init_state(config: RunConfig) -> TrainState:
    config.validate()
    tc = config.train
    set_determinism(tc.seed)
    models = ModelBundle(copy.deepcopy(config.net))
    bank = build_bank(config.layout, config.net.content_channels, config.net.attr_channels, tc.seed,
                      num_domains=config.net.num_modalities, class_names=config.class_names,
                      alpha_p=config.loss.alpha_p, structural=tc.ablation.structural_slots)
    opt_g = torch.optim.Adam(list(models.generator_parameters()), lr=tc.learning_rate, betas=tc.betas, foreach=True)
    opt_d = torch.optim.Adam(list(models.discriminator_parameters()), lr=tc.learning_rate, betas=tc.betas, foreach=True)
    return TrainState(config, models, bank, opt_g, opt_d, np.random.default_rng(tc.seed),
                      torch.Generator().manual_seed(tc.seed))


def _pixels_of(z: torch.Tensor) -> torch.Tensor:
    """``(1, C, h, w)`` -> ``(h*w, C)``."""
    return z[0].reshape(z.shape[1], -1).T


def _enhanced(state: TrainState, content, domain: int, attribute=None):
    cfg = state.config
    if not cfg.train.ablation.uses_bank:
        b, _, h, w = content.shape
        return content.new_zeros(b, cfg.net.attr_channels, h, w), None
    return read_map(content, state.bank, domain, attribute, cfg.train.read_mode)


def forward_pass(state: TrainState, batch: Batch) -> dict:
    """Both translation stages; returns every intermediate the losses need."""
    mdl = state.models
    i, j = batch.modalities
    out = {}
    zc_i, zc_j = mdl.encode_content(batch.m_i, i), mdl.encode_content(batch.m_j, j)
    za_i, za_j = mdl.encode_attribute(batch.m_i, i), mdl.encode_attribute(batch.m_j, j)
    zt_ij, aff_i = _enhanced(state, zc_i, j, za_j)
    zt_ji, aff_j = _enhanced(state, zc_j, i, za_i)
    zt_ii, _ = _enhanced(state, zc_i, i, za_i)
    zt_jj, _ = _enhanced(state, zc_j, j, za_j)
    # translation and self-reconstruction share a generator, so run them as one batch
    x_ij, x_jj = mdl.generate(torch.cat([zc_i, zc_j]),
                              torch.cat([combine(za_j, zt_ij), combine(za_j, zt_jj)]), j).split(1)
    x_ji, x_ii = mdl.generate(torch.cat([zc_j, zc_i]),
                              torch.cat([combine(za_i, zt_ji), combine(za_i, zt_ii)]), i).split(1)
    # second stage: re-encode the translations and map them back
    flags = state.config.train.ablation
    if flags.use_pgd or flags.use_sgd or flags.use_ggd:
        # re-encoded self-reconstructions join the contrast pools as generated
        # negatives, so real-vs-generated cannot stand in for subject identity
        zc_ij, zc_jr = mdl.encode_content(torch.cat([x_ij, x_jj]), j).split(1)
        zc_ji, zc_ir = mdl.encode_content(torch.cat([x_ji, x_ii]), i).split(1)
        out.update(zc_ir=zc_ir, zc_jr=zc_jr)
    else:
        zc_ij, zc_ji = mdl.encode_content(x_ij, j), mdl.encode_content(x_ji, i)
    za_ij, za_ji = mdl.encode_attribute(x_ij, j), mdl.encode_attribute(x_ji, i)
    zt_hi, _ = _enhanced(state, zc_ij, i, za_ji)
    zt_hj, _ = _enhanced(state, zc_ji, j, za_ij)
    x_hat_i = mdl.generate(zc_ij, combine(za_ji, zt_hi), i)
    x_hat_j = mdl.generate(zc_ji, combine(za_ij, zt_hj), j)
    out.update(zc_i=zc_i, zc_j=zc_j, za_i=za_i, za_j=za_j, zc_ij=zc_ij, zc_ji=zc_ji,
               x_ij=x_ij, x_ji=x_ji, x_ii=x_ii, x_jj=x_jj, x_hat_i=x_hat_i, x_hat_j=x_hat_j,
               aff_i=aff_i, aff_j=aff_j)
    return out


def granularity_terms(state: TrainState, batch: Batch, fw: dict) -> dict:
    """Pixel/structure/global contrast terms, each averaged over both directions."""
    cfg = state.config
    flags, lc = cfg.train.ablation, cfg.loss
    if not (flags.use_pgd or flags.use_sgd or flags.use_ggd):
        return {}
    zc_i, zc_j, zc_ij, zc_ji = fw["zc_i"][0], fw["zc_j"][0], fw["zc_ij"][0], fw["zc_ji"][0]
    # other-subject pool: the other image's self-reconstruction, encoded like the positive
    pool_i = [fw["zc_jr"][0]]
    pool_j = [fw["zc_ir"][0]]
    terms = {}
    if flags.use_pgd:
        terms["pgd"] = 0.5 * (
            L.pgd_loss(zc_i, zc_ij, pool_i, lc.tau1, lc.max_pixel_anchors, state.torch_gen)
            + L.pgd_loss(zc_j, zc_ji, pool_j, lc.tau1, lc.max_pixel_anchors, state.torch_gen))
    if flags.use_sgd:
        if batch.labels_i is None or batch.labels_j is None:
            raise ValueError("structure-level contrast needs label maps")
        li, lj = batch.labels_i, batch.labels_j
        terms["sgd"] = 0.5 * (
            L.sgd_loss(zc_i, zc_ij, li, [(z, lj) for z in pool_i], lc.tau2, lc.alpha_s, lc.structure_feature)
            + L.sgd_loss(zc_j, zc_ji, lj, [(z, li) for z in pool_j], lc.tau2, lc.alpha_s, lc.structure_feature))
    if flags.use_ggd:
        terms["ggd"] = 0.5 * (L.ggd_loss(zc_i, zc_ij, pool_i, lc.tau2) + L.ggd_loss(zc_j, zc_ji, pool_j, lc.tau2))
    return terms


def train_step(state: TrainState, batch: Batch) -> dict:
    """One alternating discriminator/generator update followed by one bank update."""
    mdl = state.models
    mdl.train()
    i, j = batch.modalities
    lc = state.config.loss
    fw = forward_pass(state, batch)

    # discriminators
    state.opt_d.zero_grad(set_to_none=True)
    d_loss = 0.0
    for mod, real, fake in ((i, batch.m_i, fw["x_ji"]), (j, batch.m_j, fw["x_ij"])):
        scores = mdl.discriminate_domain(torch.cat([real, fake.detach()]), mod)
        d_loss = d_loss + L.lsgan_d_loss([s[:1] for s in scores], [s[1:] for s in scores])
    zc_both = torch.cat([fw["zc_i"], fw["zc_j"]])
    if lc.lambda1 > 0:
        d_loss = d_loss + L.content_d_loss(mdl.discriminate_content(zc_both.detach()), [i, j])
    d_loss.backward()
    state.opt_d.step()

    # encoders and generators; discriminator weights need no gradient here
    for prm in mdl.discriminator_parameters():
        prm.requires_grad_(False)
    terms = {
        "adv_content": L.content_g_loss(mdl.discriminate_content(zc_both)),
        "adv_domain": L.lsgan_g_loss(mdl.discriminate_domain(fw["x_ij"], j))
        + L.lsgan_g_loss(mdl.discriminate_domain(fw["x_ji"], i)),
        "cycle": L.cycle_loss(batch.m_i, fw["x_hat_i"]) + L.cycle_loss(batch.m_j, fw["x_hat_j"]),
        "self_recon": L.self_recon_loss(batch.m_i, fw["x_ii"]) + L.self_recon_loss(batch.m_j, fw["x_jj"]),
    }
    terms.update(granularity_terms(state, batch, fw))
    try:
        total, breakdown = L.total_loss(terms, lc)
    except FloatingPointError:
        breakdown = {k: float(v.detach()) for k, v in terms.items()}
        raise NonFiniteLossError(state.step, breakdown) from None
    breakdown["disc"] = float(d_loss.detach())
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    for prm in mdl.discriminator_parameters():
        prm.requires_grad_(True)
    state._emit("optimizer_step")

    if state.config.train.ablation.uses_bank:
        _update_bank(state, batch, fw)
        state._emit("bank_update")
    breakdown["step"] = state.step
    state.step += 1
    return breakdown


def _update_bank(state: TrainState, batch: Batch, fw: dict) -> None:
    i, j = batch.modalities
    with torch.no_grad():
        q_orig = torch.cat([_pixels_of(fw["zc_i"]), _pixels_of(fw["zc_j"])])
        q_trans = torch.cat([_pixels_of(fw["zc_ij"]), _pixels_of(fw["zc_ji"])])
        aff = torch.cat([fw["aff_i"][0], fw["aff_j"][0]])
        if state.config.train.read_mode == "values":
            enh_i, enh_j = aff @ state.bank.values[i], aff @ state.bank.values[j]
        else:
            enh_i = torch.cat([fw["za_i"].expand(fw["aff_i"].shape[1], -1), fw["za_i"].expand(fw["aff_j"].shape[1], -1)])
            enh_j = torch.cat([fw["za_j"].expand(fw["aff_i"].shape[1], -1), fw["za_j"].expand(fw["aff_j"].shape[1], -1)])
        labels = None
        if state.config.train.ablation.structural_slots and batch.labels_i is not None:
            labels = torch.cat([batch.labels_i.reshape(-1), batch.labels_j.reshape(-1)])
    state.bank = update(state.bank, q_orig, q_trans, enh_i, enh_j, labels, domains=(i, j),
                        mode=state.config.train.update_norm)


def image_tensor(sl: ImageSlice | np.ndarray) -> torch.Tensor:
    px = sl.pixels if isinstance(sl, ImageSlice) else np.asarray(sl, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(px, dtype=np.float32))[None, None]


def content_labels(lm: LabelMap | None, size: int) -> torch.Tensor | None:
    if lm is None:
        return None
    return torch.from_numpy(downsample_labels(lm.classes, size, size).astype(np.int64))


class PairSampler:
    """Draws unpaired (modality i, modality j) batches from different subjects.

    Modality pairs are visited round-robin when there are more than two.
    """

    def __init__(self, corpus: Sequence[tuple[ImageSlice, LabelMap | None]], content_size: int,
                 num_modalities: int = 2):
        self.by_mod: dict[int, list] = {m: [] for m in range(num_modalities)}
        for sl, lm in corpus:
            self.by_mod[sl.modality_id].append((sl, lm))
        for m, items in self.by_mod.items():
            if not items:
                raise ValueError(f"corpus has no images of modality {m}")
        self.pairs = list(itertools.combinations(range(num_modalities), 2))
        self.content_size = content_size

    def sample(self, rng: np.random.Generator, step: int) -> Batch:
        i, j = self.pairs[step % len(self.pairs)]
        a = self.by_mod[i][int(rng.integers(len(self.by_mod[i])))]
        pool_j = [it for it in self.by_mod[j] if it[0].subject_id != a[0].subject_id] or self.by_mod[j]
        b = pool_j[int(rng.integers(len(pool_j)))]
        return Batch(image_tensor(a[0]), content_labels(a[1], self.content_size),
                     image_tensor(b[0]), content_labels(b[1], self.content_size), (i, j))


def calibrate_segmenters(state: TrainState, corpus) -> None:
    """Fit one toy segmenter per modality on labelled training images."""
    k = len(state.config.class_names)
    for m in range(state.config.net.num_modalities):
        items = [(sl, lm) for sl, lm in corpus if sl.modality_id == m and lm is not None]
        if items:
            seg = ToySegmenter.fit([sl for sl, _ in items], [lm for _, lm in items], k)
            state.segmenters[m] = seg.to_list()


@torch.no_grad()
def translate(state: TrainState, m, source_modality: int, target_modality: int,
              attribute: torch.Tensor | None = None) -> ImageSlice:
    """Translate one slice with the bank-retrieved target attribute (no labels used)."""
    cfg = state.config
    for mod in (source_modality, target_modality):
        if not 0 <= mod < cfg.net.num_modalities:
            raise ValueError(f"unknown modality {mod}")
    mdl = state.models
    mdl.eval()
    x = image_tensor(m)
    zc = mdl.encode_content(x, source_modality)
    if attribute is None:
        attribute = torch.zeros(1, cfg.net.attr_channels)
        if cfg.train.test_attribute == "sample":
            gen = torch.Generator().manual_seed(cfg.train.seed)
            attribute = torch.randn(1, cfg.net.attr_channels, generator=gen)
    zt, _ = _enhanced(state, zc, target_modality, attribute)
    out = mdl.generate(zc, combine(attribute, zt), target_modality)[0, 0].numpy()
    sid = m.subject_id if isinstance(m, ImageSlice) else "input"
    idx = m.slice_index if isinstance(m, ImageSlice) else 0
    return ImageSlice(np.clip(out, -1.0, 1.0), sid, target_modality, idx)


@torch.no_grad()
def self_reconstruction_l1(state: TrainState, corpus) -> float:
    """Mean L1 between each image and its reconstruction from its own codes."""
    mdl = state.models
    mdl.eval()
    errs = []
    for sl, _ in corpus:
        x = image_tensor(sl)
        m = sl.modality_id
        zc, za = mdl.encode_content(x, m), mdl.encode_attribute(x, m)
        zt, _ = _enhanced(state, zc, m, za)
        errs.append(float(L.self_recon_loss(x, mdl.generate(zc, combine(za, zt), m))))
    return float(np.mean(errs))


def _by_subject(corpus):
    out: dict[str, dict[int, tuple]] = {}
    for sl, lm in corpus:
        out.setdefault(sl.subject_id, {}).setdefault(sl.modality_id, (sl, lm))
    return out


def evaluate(state: TrainState, corpus, directions: Sequence[tuple[int, int]] = ((0, 1), (1, 0))) -> list[dict]:
    """One metrics row per (subject, direction).

    PSNR/SSIM compare the translation with the subject's real target-modality
    slice; per-class Dice/VS use the target-modality toy segmenter when
    labels and a calibrated segmenter are available.
    """
    rows = []
    names = state.config.class_names
    for sid, mods in sorted(_by_subject(corpus).items()):
        for src, tgt in directions:
            if src not in mods or tgt not in mods:
                continue
            (s_img, s_lab), (t_img, _) = mods[src], mods[tgt]
            out = translate(state, s_img, src, tgt)
            row = {"subject_id": sid, "direction": f"{src}->{tgt}",
                   "psnr_db": psnr(t_img, out), "ssim": ssim(t_img, out)}
            if s_lab is not None and tgt in state.segmenters:
                pred = ToySegmenter(state.segmenters[tgt])(out)
                scores = class_scores(s_lab.classes, pred, names)
                for name, sc in scores.items():
                    row[f"dice_{name}_fraction"] = sc.dice
                    row[f"vs_{name}_fraction"] = sc.vol_similarity
                row["mean_dice"] = float(np.mean([sc.dice for sc in scores.values() if not sc.absent]))
            rows.append(row)
    return rows


@torch.no_grad()
def cycle_l1(state: TrainState, corpus, directions=((0, 1), (1, 0))) -> float:
    errs = []
    for sid, mods in sorted(_by_subject(corpus).items()):
        for src, tgt in directions:
            if src in mods:
                x = mods[src][0]
                back = translate(state, translate(state, x, src, tgt), tgt, src)
                errs.append(float(np.abs(back.pixels - x.pixels).mean()))
    return float(np.mean(errs))


# ---------------------------------------------------------------- persistence

def _fmt(v) -> str:
    return repr(float(v)) if not isinstance(v, int) else str(v)


class TrainLog:
    """Append-only CSV training log; one row per step."""

    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        exists = append and self.path.exists()
        self.fh = open(self.path, "a" if exists else "w", newline="")
        self.writer = csv.writer(self.fh)
        if not exists:
            self.writer.writerow(LOG_COLUMNS)

    def write(self, row: dict) -> None:
        self.writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])

    def close(self) -> None:
        self.fh.close()


def save_state(state: TrainState, path) -> None:
    """Checkpoint archive ``<path>`` (npz) plus ``<path>.json`` sidecar."""
    path = Path(path)
    arrays = {f"model.{k}": v.detach().cpu().numpy() for k, v in state.models.state_dict().items()}
    arrays.update(state.bank.to_arrays())
    groups = {}
    for name, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        sd = opt.state_dict()
        for idx, st in sd["state"].items():
            for key, val in st.items():
                arrays[f"{name}.{idx}.{key}"] = torch.as_tensor(val).numpy()
        groups[name] = sd["param_groups"]
    arrays["rng.torch"] = torch.get_rng_state().numpy()
    arrays["rng.torch_gen"] = state.torch_gen.get_state().numpy()
    write_npz(path, arrays)
    meta = {
        "step": state.step,
        "config": state.config.to_dict(),
        "param_groups": groups,
        "numpy_rng": state.rng.bit_generator.state,
        "segmenters": {str(k): v for k, v in state.segmenters.items()},
        "parameter_count": state.models.parameter_count,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_state(path) -> TrainState:
    path = Path(path)
    side = path.with_suffix(path.suffix + ".json")
    if not path.exists() or not side.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta = json.loads(side.read_text())
    config = RunConfig.from_dict(meta["config"])
    state = init_state(config)
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    load_state_arrays(state.models, {k[6:]: v for k, v in arrays.items() if k.startswith("model.")})
    state.bank = MemoryBank.from_arrays(arrays)
    for name, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        per_param: dict[int, dict] = {}
        for key, val in arrays.items():
            if key.startswith(name + "."):
                _, idx, field_name = key.split(".", 2)
                per_param.setdefault(int(idx), {})[field_name] = torch.from_numpy(np.array(val))
        opt.load_state_dict({"state": per_param, "param_groups": meta["param_groups"][name]})
    torch.set_rng_state(torch.from_numpy(arrays["rng.torch"]))
    state.torch_gen.set_state(torch.from_numpy(arrays["rng.torch_gen"]))
    state.rng.bit_generator.state = meta["numpy_rng"]
    state.step = int(meta["step"])
    state.segmenters = {int(k): v for k, v in meta.get("segmenters", {}).items()}
    return state


def save_snapshot(img: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.clip((np.asarray(img) + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def fit(config: RunConfig, corpus, out_dir=None, test_corpus=None, resume_from=None,
        hooks: Sequence[Callable] = (), progress: Callable[[dict], None] | None = None):
    """Run ``config.train.steps`` steps; returns ``(state, log_rows)``.

    With ``out_dir`` set, writes ``train_log.csv``, ``config.json``, periodic
    checkpoints ``ckpt_<step>.npz`` and the final ``final.npz``.
    """
    state = load_state(resume_from) if resume_from is not None else init_state(config)
    state.hooks.extend(hooks)
    if not state.segmenters:
        calibrate_segmenters(state, corpus)
    tc = state.config.train
    sampler = PairSampler(corpus, state.config.net.content_size, state.config.net.num_modalities)
    out = Path(out_dir) if out_dir is not None else None
    tlog = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(state.config.dumps() + "\n")
        tlog = TrainLog(out / "train_log.csv", append=resume_from is not None)
    rows = []
    try:
        while state.step < tc.steps:
            batch = sampler.sample(state.rng, state.step)
            row = train_step(state, batch)
            rows.append(row)
            if tlog is not None:
                tlog.write(row)
            if progress is not None:
                progress(row)
            if out is not None and tc.checkpoint_every and state.step % tc.checkpoint_every == 0:
                save_state(state, out / f"ckpt_{state.step:06d}.npz")
            if out is not None and test_corpus and tc.eval_every and state.step % tc.eval_every == 0:
                _snapshot(state, test_corpus, out / f"eval_{state.step:06d}")
    finally:
        if tlog is not None:
            tlog.close()
    if out is not None:
        save_state(state, out / "final.npz")
    return state, rows


def _snapshot(state: TrainState, corpus, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for sid, mods in sorted(_by_subject(corpus).items())[:2]:
        for src in sorted(mods):
            tgt = (src + 1) % state.config.net.num_modalities
            out = translate(state, mods[src][0], src, tgt)
            save_snapshot(out.pixels, directory / f"{sid}_{src}to{tgt}.png")
