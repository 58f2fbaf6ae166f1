"""Synthetic factorized video worlds.

Every clip is generated from four independent discrete factors
(identity, action, clothing, view). Per-factor latent vectors are mixed
into token space through orthonormal-column matrices, so each factor
occupies its own linear subspace and disentanglement is achievable by
construction: if a model fails to separate the factors, the model is at
fault, not the data.

Frame features for a clip with labels (i, a, c, v) are

    f[t, n] = g_id[n] M_id u_id(i) + g_act[n] M_act u_act(a, i, t)
              + g_cloth[n] M_cloth u_cloth(c) + g_view[n] M_view u_view(v)
              + s_n + eps[t, n]

where u_act varies over the frame index t (the motion component, with an
optional small per-identity gait term), s_n is a fixed per-token-position
signature, and eps is isotropic Gaussian noise. The per-token gains g_*
make token positions factor-specialized the way image patches are
(clothing patches vs body-shape patches vs moving limbs): each token
position is dominated by one factor, with a small bleed of the others.
Without this heterogeneity attention would have no lever to separate
factors — every convex combination of identical-content tokens carries
every factor equally.

Each clip also carries three text embeddings standing in for encoded
biometrics / motion / non-biometrics prompts. They are derived from the
same latents per stream plus per-call jitter calibrated to the measured
run-to-run prompt drift (mean repeat-cosine 0.92 / 0.68 / 0.79 for the
biometrics / motion / non-biometrics streams). When the text dimension
equals the token dimension the prompt anchors live directly in the
matching visual factor subspaces, mirroring how jointly-pretrained
encoders align the two modalities; otherwise a fixed random projection
maps them into text space.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .validation import check_vector

logger = logging.getLogger(__name__)

# Repeat-draw cosine similarity targets for (biometrics, motion, non-biometrics).
TEXT_SIMILARITY_TARGETS = (0.92, 0.68, 0.79)


def jitter_for_similarity(target: float, dim: int) -> float:
    """Jitter sigma so two draws of ``anchor + sigma*N(0,I)`` have mean cosine ~= target.

    For a unit-norm anchor the expected cosine is approximately
    1 / (1 + sigma^2 * dim).
    """
    if not 0.0 < target < 1.0:
        raise ValueError(f"similarity target must be in (0, 1), got {target}")
    return math.sqrt((1.0 - target) / (target * dim))


@dataclass
class WorldSpec:
    """Parameters of a synthetic world.

    text_jitter, when None, is auto-calibrated per stream from
    TEXT_SIMILARITY_TARGETS at the world's text dimension.
    """

    num_identities: int
    num_actions: int
    num_clothing: int
    num_views: int
    clips_per_combination: int = 1
    frames_per_clip: int = 8
    tokens_per_frame: int = 8
    token_dim: int = 64
    text_dim: Optional[int] = None
    noise_sigma: float = 0.3
    text_jitter: Optional[tuple] = None
    latent_dim: Optional[int] = None
    identity_scale: float = 1.0
    action_scale: float = 1.0
    clothing_scale: float = 1.0
    view_scale: float = 1.0
    token_signature_scale: float = 0.1
    token_bleed: float = 0.1
    motion_identity_coupling: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        counts = {
            "num_identities": self.num_identities,
            "num_actions": self.num_actions,
            "num_clothing": self.num_clothing,
            "num_views": self.num_views,
            "clips_per_combination": self.clips_per_combination,
            "frames_per_clip": self.frames_per_clip,
            "tokens_per_frame": self.tokens_per_frame,
        }
        for name, value in counts.items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a count >= 1, got {value!r}")
        if self.token_dim < 4:
            raise ValueError(f"token_dim must be >= 4, got {self.token_dim}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.text_dim is not None and self.text_dim < 1:
            raise ValueError(f"text_dim must be >= 1, got {self.text_dim}")
        if self.latent_dim is not None:
            if self.latent_dim < 1 or 4 * self.latent_dim > self.token_dim:
                raise ValueError(
                    "latent_dim must satisfy 1 <= latent_dim <= token_dim // 4"
                )
        for name in ("identity_scale", "action_scale", "clothing_scale",
                     "view_scale", "token_signature_scale",
                     "motion_identity_coupling"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.token_bleed <= 1.0:
            raise ValueError(f"token_bleed must be in [0, 1], got {self.token_bleed}")
        if self.text_jitter is not None:
            jit = tuple(float(j) for j in self.text_jitter)
            if len(jit) != 3 or any(j < 0 for j in jit):
                raise ValueError("text_jitter must be a triple of nonneg reals")
            self.text_jitter = jit

    @property
    def resolved_text_dim(self) -> int:
        return self.token_dim if self.text_dim is None else self.text_dim

    @property
    def resolved_latent_dim(self) -> int:
        if self.latent_dim is not None:
            return self.latent_dim
        return max(1, min(8, self.token_dim // 4))

    @property
    def resolved_text_jitter(self) -> tuple:
        if self.text_jitter is not None:
            return self.text_jitter
        d = self.resolved_text_dim
        return tuple(jitter_for_similarity(s, d) for s in TEXT_SIMILARITY_TARGETS)

    @property
    def num_clips(self) -> int:
        return (self.num_identities * self.num_actions * self.num_clothing
                * self.num_views * self.clips_per_combination)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if d["text_jitter"] is not None:
            d["text_jitter"] = list(d["text_jitter"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        if d.get("text_jitter") is not None:
            d["text_jitter"] = tuple(d["text_jitter"])
        return cls(**d)


@dataclass
class VideoSample:
    """One clip: frame token features plus its factor labels."""

    clip_id: str
    frames: np.ndarray  # (frames, tokens, dim) float32
    identity: int
    action: int
    clothing: int
    view: int
    key_frame_index: int


@dataclass
class TextTriplet:
    """Per-clip text embeddings for the three prompt streams."""

    biometrics: np.ndarray
    motion: np.ndarray
    nonbiometrics: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([self.biometrics, self.motion, self.nonbiometrics])


class BiometricsStore:
    """Per-identity running average of submitted biometrics embeddings.

    The stored vector after n submissions is the exact arithmetic mean of
    all n submitted vectors; the first submission is returned unchanged.
    """

    def __init__(self, dim: int):
        self.dim = int(dim)
        self._mean = {}
        self._count = {}

    def update(self, identity: int, embedding) -> np.ndarray:
        embedding = check_vector(embedding, dim=self.dim, name="embedding")
        n = self._count.get(identity, 0)
        if n == 0:
            self._mean[identity] = embedding.copy()
        else:
            old = self._mean[identity]
            self._mean[identity] = old + (embedding - old) / (n + 1)
        self._count[identity] = n + 1
        return self._mean[identity].copy()

    def get(self, identity: int) -> np.ndarray:
        return self._mean[identity].copy()

    def count(self, identity: int) -> int:
        return self._count.get(identity, 0)


def refine_biometrics_embedding(store: BiometricsStore, identity: int,
                                new_embedding) -> np.ndarray:
    """Submit one more biometrics embedding and return the refreshed running mean."""
    return store.update(identity, new_embedding)


def _unit_rows(rng: np.random.Generator, shape) -> np.ndarray:
    """Gaussian rows normalized to unit norm (last axis)."""
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


class FactorizedWorld:
    """Fixed latent structure of one world seed: mixing bases, per-label
    latents, motion/gait trajectories, and prompt anchors."""

    def __init__(self, spec: WorldSpec):
        spec.validate()
        self.spec = spec
        L = spec.resolved_latent_dim
        D = spec.token_dim
        Dt = spec.resolved_text_dim
        root = np.random.SeedSequence(spec.seed)
        latent_child, clip_child = root.spawn(2)
        latent_rng = np.random.default_rng(latent_child)

        # One orthogonal basis, disjoint column blocks per factor: factors
        # occupy exactly orthogonal subspaces.
        gauss = latent_rng.standard_normal((D, D))
        basis, _ = np.linalg.qr(gauss)
        self.mix_identity = basis[:, 0 * L:1 * L]
        self.mix_action = basis[:, 1 * L:2 * L]
        self.mix_clothing = basis[:, 2 * L:3 * L]
        self.mix_view = basis[:, 3 * L:4 * L]

        self.identity_latents = _unit_rows(latent_rng, (spec.num_identities, L))
        self.clothing_latents = _unit_rows(latent_rng, (spec.num_clothing, L))
        self.view_latents = _unit_rows(latent_rng, (spec.num_views, L))
        # Per-action motion trajectory, unit per frame; a constant per-identity
        # gait vector is blended in with a small coupling so motion carries an
        # identity-linked component (gait / swing style) that survives
        # temporal pooling.
        self.action_trajectories = _unit_rows(
            latent_rng, (spec.num_actions, spec.frames_per_clip, L))
        self.gait_vectors = _unit_rows(latent_rng, (spec.num_identities, L))
        self.token_signatures = (spec.token_signature_scale
                                 * latent_rng.standard_normal((spec.tokens_per_frame, D)))
        # Token-region factor profiles: token n is dominated by factor
        # n % 4 (identity, action, clothing, view), others at token_bleed.
        gains = np.full((4, spec.tokens_per_frame), spec.token_bleed)
        for n in range(spec.tokens_per_frame):
            gains[n % 4, n] = 1.0
        self.token_gains = gains  # rows: identity, action, clothing, view

        # Prompt anchors live in the matching visual factor subspaces
        # (cross-modal alignment, as jointly-pretrained encoders provide);
        # a fixed random map carries them to text space when D_t != D.
        anchor_b = self.identity_latents @ self.mix_identity.T
        motion_summary = self.action_trajectories.mean(axis=1)
        motion_summary /= np.linalg.norm(motion_summary, axis=-1, keepdims=True)
        anchor_m = motion_summary @ self.mix_action.T
        anchor_n = self.clothing_latents @ self.mix_clothing.T
        if Dt != D:
            text_map = latent_rng.standard_normal((Dt, D)) / math.sqrt(D)
            anchor_b, anchor_m, anchor_n = (a @ text_map.T for a in
                                            (anchor_b, anchor_m, anchor_n))
        self.text_anchor_biometrics = anchor_b / np.linalg.norm(anchor_b, axis=-1, keepdims=True)
        self.text_anchor_motion = anchor_m / np.linalg.norm(anchor_m, axis=-1, keepdims=True)
        self.text_anchor_nonbiometrics = anchor_n / np.linalg.norm(anchor_n, axis=-1, keepdims=True)

        self._clip_seed_root = clip_child

    def clip_mean(self, identity: int, action: int, clothing: int, view: int) -> np.ndarray:
        """Noise-free frame features (frames, tokens, dim) for one label tuple."""
        s = self.spec
        g_id, g_act, g_cloth, g_view = self.token_gains  # each (tokens,)
        id_vec = s.identity_scale * self.mix_identity @ self.identity_latents[identity]
        cloth_vec = s.clothing_scale * self.mix_clothing @ self.clothing_latents[clothing]
        view_vec = s.view_scale * self.mix_view @ self.view_latents[view]
        static = (g_id[:, None] * id_vec[None, :]
                  + g_cloth[:, None] * cloth_vec[None, :]
                  + g_view[:, None] * view_vec[None, :])  # (tokens, dim)
        motion_lat = (self.action_trajectories[action]
                      + s.motion_identity_coupling * self.gait_vectors[identity][None, :])
        motion = s.action_scale * motion_lat @ self.mix_action.T  # (frames, dim)
        frames = static[None, :, :] + g_act[None, :, None] * motion[:, None, :]
        return frames + self.token_signatures[None, :, :]

    def sample_text_embedding(self, stream: str, label: int,
                              rng: np.random.Generator) -> np.ndarray:
        """One raw (jittered) text-embedding draw for a label; simulates
        run-to-run VLM prompt drift."""
        anchors, jitter = {
            "biometrics": (self.text_anchor_biometrics, self.spec.resolved_text_jitter[0]),
            "motion": (self.text_anchor_motion, self.spec.resolved_text_jitter[1]),
            "nonbiometrics": (self.text_anchor_nonbiometrics, self.spec.resolved_text_jitter[2]),
        }[stream]
        return anchors[label] + jitter * rng.standard_normal(anchors.shape[1])


@dataclass
class Dataset:
    """A list of clips with aligned optional text triplets."""

    samples: list
    texts: Optional[list]  # aligned with samples, or None (inference-only)
    frames_per_clip: int
    tokens_per_frame: int
    token_dim: int
    text_dim: Optional[int]
    num_identities: int
    num_actions: int
    num_clothing: int
    num_views: int

    @property
    def has_texts(self) -> bool:
        return self.texts is not None

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self, which: str) -> np.ndarray:
        return np.array([getattr(s, which) for s in self.samples], dtype=np.int64)

    def frames_array(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        idx = range(len(self.samples)) if indices is None else indices
        return np.stack([self.samples[i].frames for i in idx])

    def texts_array(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        if self.texts is None:
            raise ValueError("dataset has no text embeddings (inference-only)")
        idx = range(len(self.samples)) if indices is None else indices
        return np.stack([self.texts[i].as_array() for i in idx])


def generate_dataset(spec: WorldSpec) -> Dataset:
    """Generate the full factorial dataset for a world spec.

    Deterministic: identical spec+seed give a bit-identical dataset. Clips
    are enumerated identity-major; each clip gets fresh feature noise and
    fresh text jitter. Biometrics text follows the once-per-identity
    running-average refinement, so a clip's stored biometrics embedding is
    the mean of all draws for that identity up to that clip.
    """
    spec.validate()
    world = FactorizedWorld(spec)
    store = BiometricsStore(spec.resolved_text_dim)
    clip_rng = np.random.default_rng(world._clip_seed_root)

    samples, texts = [], []
    clip_index = 0
    for i in range(spec.num_identities):
        for a in range(spec.num_actions):
            for c in range(spec.num_clothing):
                for v in range(spec.num_views):
                    mean = world.clip_mean(i, a, c, v)
                    for _ in range(spec.clips_per_combination):
                        noise = spec.noise_sigma * clip_rng.standard_normal(mean.shape)
                        frames = (mean + noise).astype(np.float32)
                        samples.append(VideoSample(
                            clip_id=f"clip_{clip_index:06d}",
                            frames=frames,
                            identity=i, action=a, clothing=c, view=v,
                            key_frame_index=spec.frames_per_clip // 2,
                        ))
                        t_b = refine_biometrics_embedding(
                            store, i, world.sample_text_embedding("biometrics", i, clip_rng))
                        t_m = world.sample_text_embedding("motion", a, clip_rng)
                        t_n = world.sample_text_embedding("nonbiometrics", c, clip_rng)
                        texts.append(TextTriplet(
                            biometrics=t_b.astype(np.float32),
                            motion=t_m.astype(np.float32),
                            nonbiometrics=t_n.astype(np.float32),
                        ))
                        clip_index += 1

    return Dataset(
        samples=samples,
        texts=texts,
        frames_per_clip=spec.frames_per_clip,
        tokens_per_frame=spec.tokens_per_frame,
        token_dim=spec.token_dim,
        text_dim=spec.resolved_text_dim,
        num_identities=spec.num_identities,
        num_actions=spec.num_actions,
        num_clothing=spec.num_clothing,
        num_views=spec.num_views,
    )


@dataclass(frozen=True)
class Protocol:
    """Evaluation protocol: activity regime x view handling."""

    activity: str  # "same" | "cross"
    exclude_same_view: bool = False

    def __post_init__(self):
        if self.activity not in ("same", "cross"):
            raise ValueError(f"activity must be 'same' or 'cross', got {self.activity!r}")

    @property
    def name(self) -> str:
        view = "exclude_view" if self.exclude_same_view else "include_view"
        return f"{self.activity}_activity/{view}"

    @classmethod
    def parse(cls, text: str) -> "Protocol":
        parts = text.strip().split("/")
        if len(parts) not in (1, 2):
            raise ValueError(f"cannot parse protocol {text!r}")
        activity = parts[0].replace("_activity", "")
        exclude = False
        if len(parts) == 2:
            if parts[1] not in ("include_view", "exclude_view"):
                raise ValueError(f"cannot parse protocol {text!r}")
            exclude = parts[1] == "exclude_view"
        return cls(activity=activity, exclude_same_view=exclude)


ALL_PROTOCOLS = (
    Protocol("same", False),
    Protocol("same", True),
    Protocol("cross", False),
    Protocol("cross", True),
)


@dataclass
class Split:
    """Index sets produced by split_protocol (indices into the dataset)."""

    protocol: Protocol
    train_indices: np.ndarray
    gallery_indices: np.ndarray
    probe_indices: np.ndarray
    dropped_identities: tuple = ()


def _assign_same_activity(dataset, test_clips, rng):
    """Per (identity, action) group: ~20% of clips to probe, rest to gallery,
    then repair so probe and gallery action sets are equal."""
    groups = {}
    for idx in test_clips:
        s = dataset.samples[idx]
        groups.setdefault((s.identity, s.action), []).append(idx)

    gallery, probe = [], []
    for key in sorted(groups):
        members = sorted(groups[key])
        rng.shuffle(members)
        if len(members) < 2:
            gallery.extend(members)
            continue
        n_probe = max(1, round(0.2 * len(members)))
        probe.extend(members[:n_probe])
        gallery.extend(members[n_probe:])

    probe_actions = {dataset.samples[i].action for i in probe}
    gallery_actions = {dataset.samples[i].action for i in gallery}
    for action in sorted(gallery_actions - probe_actions):
        movable = [i for i in gallery if dataset.samples[i].action == action]
        if len(movable) < 2:
            raise ValueError(
                f"cannot satisfy same-activity protocol: action {action} has a "
                "single test clip, so it cannot appear in both probe and gallery"
            )
        moved = movable[0]
        gallery.remove(moved)
        probe.append(moved)
    probe_actions = {dataset.samples[i].action for i in probe}
    gallery_actions = {dataset.samples[i].action for i in gallery}
    if probe_actions != gallery_actions:
        raise ValueError("same-activity split repair failed to equalize action sets")
    return gallery, probe


def _assign_cross_activity(dataset, test_clips, rng):
    """Disjoint action halves: ~20% of actions feed the probe set."""
    actions = sorted({dataset.samples[i].action for i in test_clips})
    if len(actions) < 2:
        raise ValueError("cross-activity protocol requires >= 2 actions in the test set")
    actions = np.array(actions)
    rng.shuffle(actions)
    n_probe_actions = max(1, round(0.2 * len(actions)))
    probe_actions = set(actions[:n_probe_actions].tolist())
    gallery = [i for i in test_clips if dataset.samples[i].action not in probe_actions]
    probe = [i for i in test_clips if dataset.samples[i].action in probe_actions]
    return gallery, probe


def split_protocol(dataset: Dataset, protocol: Protocol, split_seed: int = 0) -> Split:
    """Split a dataset into train / gallery / probe under a protocol.

    Train and test identities are disjoint (80/20); probe and gallery share
    all retained test identities. Same-activity: equal action sets on both
    sides. Cross-activity: disjoint action sets. Test identities that cannot
    appear on both sides are dropped (recorded on the returned Split).
    View exclusion is a matching-time rule and is carried on the protocol.
    """
    if isinstance(protocol, str):
        protocol = Protocol.parse(protocol)
    identities = sorted({s.identity for s in dataset.samples})
    if len(identities) < 2:
        raise ValueError("split_protocol requires a dataset with >= 2 identities")
    rng = np.random.default_rng(split_seed)
    identities = np.array(identities)
    rng.shuffle(identities)
    n_test = int(np.clip(round(0.2 * len(identities)), 1, len(identities) - 1))
    test_ids = set(identities[:n_test].tolist())

    train = [i for i, s in enumerate(dataset.samples) if s.identity not in test_ids]
    test_clips = [i for i, s in enumerate(dataset.samples) if s.identity in test_ids]

    if protocol.activity == "same":
        gallery, probe = _assign_same_activity(dataset, test_clips, rng)
    else:
        gallery, probe = _assign_cross_activity(dataset, test_clips, rng)

    gallery_ids = {dataset.samples[i].identity for i in gallery}
    probe_ids = {dataset.samples[i].identity for i in probe}
    dropped = tuple(sorted(test_ids - (gallery_ids & probe_ids)))
    if dropped:
        logger.warning("dropping %d test identities absent from probe or gallery: %s",
                       len(dropped), dropped)
        keep = gallery_ids & probe_ids
        if not keep:
            raise ValueError("no test identity appears in both probe and gallery")
        gallery = [i for i in gallery if dataset.samples[i].identity in keep]
        probe = [i for i in probe if dataset.samples[i].identity in keep]

    return Split(
        protocol=protocol,
        train_indices=np.array(sorted(train), dtype=np.int64),
        gallery_indices=np.array(sorted(gallery), dtype=np.int64),
        probe_indices=np.array(sorted(probe), dtype=np.int64),
        dropped_identities=dropped,
    )


def sample_frame_indices(total_frames: int, num_frames: int = 8, stride: int = 4,
                         rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Frame subsampling for ingested real clips: ``num_frames`` at a fixed
    stride with a random start (deterministic center start when rng is None).

    The stride shrinks if the clip is too short for the requested span.
    """
    if total_frames < num_frames:
        raise ValueError(
            f"clip has {total_frames} frames, cannot sample {num_frames}")
    if num_frames == 1:
        eff_stride = 1
    else:
        eff_stride = max(1, min(stride, (total_frames - 1) // (num_frames - 1)))
    span = eff_stride * (num_frames - 1) + 1
    max_start = total_frames - span
    start = (max_start // 2) if rng is None else int(rng.integers(0, max_start + 1))
    return start + eff_stride * np.arange(num_frames)
