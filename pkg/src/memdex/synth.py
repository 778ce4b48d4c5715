"""Synthetic corpora with known family and group structure.

Keypoints: every family owns a set of anchor descriptors. A member draws a
``family_signal`` fraction of its keypoints as small perturbations of randomly
chosen anchors and the rest as background clutter.

Deep vectors: group mean + family offset + subject noise. The family offset
scales with ``family_signal`` and the group mean separation with
``group_signal``.

``modality_complementarity`` marks a fraction of families as hard for exactly
one modality. Hard families of the same kind are paired up and, for that one
modality, swap their family component between second members: siblings then
look unrelated while two cross-family pairs look related. Half of the hard
families are fooled this way in the keypoints, the other half in the deep
vectors, so each modality errs on a disjoint set of pairs while every subject
keeps the same marginal statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from memdex.model import Dataset, DeepVector, KeypointSet, SubjectRecord

ANCHOR_SCALE = 8.0      # per-element std of anchors and clutter
MEMBER_JITTER = 1.0     # per-element std of a member's copy of an anchor
FAMILY_SCALE = 1.0      # per-element std of the deep family offset at full signal
DEEP_NOISE = 1.0        # per-element std of per-subject deep noise
GROUP_LABELS = ("F", "M")


@dataclass(frozen=True)
class SynthConfig:
    n_families: int = 40
    members_per_family: int | tuple[int, int] = 2
    keypoints_per_subject: int = 200
    d_kp: int = 64
    d_dv: int = 64
    family_signal: float = 0.9
    group_signal: float = 0.5
    modality_complementarity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.member_range
        if min(self.n_families, lo, self.keypoints_per_subject, self.d_kp, self.d_dv) < 1:
            raise ValueError("all counts must be >= 1")
        if hi < lo:
            raise ValueError("members_per_family range is empty")
        for name in ("family_signal", "group_signal", "modality_complementarity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def member_range(self) -> tuple[int, int]:
        m = self.members_per_family
        return (m, m) if isinstance(m, int) else (int(m[0]), int(m[1]))


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Build a corpus; identical configs give identical datasets."""
    rng = np.random.default_rng(cfg.seed)
    k = cfg.keypoints_per_subject
    n_anchor = round(cfg.family_signal * k)

    group_dir = rng.normal(size=cfg.d_dv)
    group_dir /= np.linalg.norm(group_dir)
    total_std = np.hypot(FAMILY_SCALE, DEEP_NOISE)
    half_gap = 0.5 * cfg.group_signal * total_std * np.sqrt(cfg.d_dv)
    group_means = {GROUP_LABELS[0]: half_gap * group_dir, GROUP_LABELS[1]: -half_gap * group_dir}

    # hard-for-one-modality families, chosen without replacement
    n_hard = round(cfg.modality_complementarity * cfg.n_families)
    hard = rng.permutation(cfg.n_families)[:n_hard].tolist()
    n_shallow_hard = n_hard - n_hard // 2
    shallow_partner = _pair_up(hard[:n_shallow_hard])
    deep_partner = _pair_up(hard[n_shallow_hard:])

    anchors = [rng.normal(scale=ANCHOR_SCALE, size=(k, cfg.d_kp))
               for _ in range(cfg.n_families)]
    offsets = [rng.normal(scale=FAMILY_SCALE * cfg.family_signal, size=cfg.d_dv)
               for _ in range(cfg.n_families)]
    # stand-ins for a hard family left without a partner
    spare_anchors = rng.normal(scale=ANCHOR_SCALE, size=(k, cfg.d_kp))
    spare_offset = rng.normal(scale=FAMILY_SCALE * cfg.family_signal, size=cfg.d_dv)

    lo, hi = cfg.member_range
    width = len(str(cfg.n_families - 1))
    subjects = []
    for f in range(cfg.n_families):
        fam_id = f"F{f:0{width}d}"
        n_members = int(rng.integers(lo, hi + 1))
        for m in range(n_members):
            sid = f"{fam_id}_{m}"
            group = GROUP_LABELS[int(rng.integers(0, 2))]
            own_anchors, own_offset = anchors[f], offsets[f]
            if m % 2 == 1 and f in shallow_partner:
                p = shallow_partner[f]
                own_anchors = anchors[p] if p >= 0 else spare_anchors
            if m % 2 == 1 and f in deep_partner:
                p = deep_partner[f]
                own_offset = offsets[p] if p >= 0 else spare_offset
            pick = rng.choice(k, size=n_anchor, replace=False)
            shared = own_anchors[pick] + rng.normal(scale=MEMBER_JITTER,
                                                    size=(n_anchor, cfg.d_kp))
            clutter = rng.normal(scale=ANCHOR_SCALE, size=(k - n_anchor, cfg.d_kp))
            desc = np.vstack([shared, clutter])[rng.permutation(k)]
            positions = rng.uniform(0.0, 100.0, size=(k, 3))
            scales = rng.uniform(1.0, 4.0, size=k)
            vec = group_means[group] + own_offset + rng.normal(scale=DEEP_NOISE, size=cfg.d_dv)
            subjects.append(SubjectRecord(sid, fam_id, group,
                                          KeypointSet(positions, scales, desc, cfg.d_kp),
                                          DeepVector(vec)))
    return Dataset(tuple(subjects), cfg.d_kp, cfg.d_dv)


def _pair_up(families: list[int]) -> dict[int, int]:
    """Partner map over consecutive entries; an odd one out maps to -1."""
    out = {}
    for i in range(0, len(families) - 1, 2):
        a, b = families[i], families[i + 1]
        out[a], out[b] = b, a
    if len(families) % 2:
        out[families[-1]] = -1
    return out
