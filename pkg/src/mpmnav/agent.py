"""History-aware multimodal navigation agent.

A text encoder (or, for masked path modeling, a linear projection of facing
views) produces the conditioning stream. Past panoramas are pooled by the
panorama transformer and contextualized along time; the current panorama is
encoded by the same panorama transformer. A dual-stream cross-modal stack
fuses conditioning with vision, and each candidate is scored by a dot product
with the pooled state.

Everything is batched over rows = (trajectory, step) so a whole teacher-forced
batch is one forward pass. The temporal transformer is causal, which makes
the history states of a prefix identical to encoding that prefix alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path as FsPath

import numpy as np

from .data import PAD_ID, START_HEADING, MaskedPath, facing_view_sequence
from .neuralcore import tensor as T
from .neuralcore.nn import (
    apply_layer_norm,
    apply_linear,
    attention_block,
    encoder_layer,
    ffn_block,
    init_attention,
    init_encoder_layer,
    init_ffn,
    init_layer_norm,
    init_linear,
)
from .neuralcore.params import ParameterStore
from .neuralcore.tensor import Tensor
from .world import D_VIEW, K_VIEWS, STOP, Environment, bin_heading

TEXT, PATH = 0, 1
CORE_EXCLUDED_PREFIXES = ("head.",)


class AgentError(ValueError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    d_model: int = 128
    n_heads: int = 4
    text_layers: int = 2
    pano_layers: int = 1
    temporal_layers: int = 1
    crossmodal_layers: int = 2
    d_v: int = D_VIEW
    vocab_size: int = 42
    max_instruction_len: int = 64
    max_path_len: int = 16
    max_history_len: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise AgentError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for f in ("text_layers", "pano_layers", "temporal_layers", "crossmodal_layers"):
            if getattr(self, f) < 1:
                raise AgentError(f"{f} must be >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise AgentError(f"unknown config fields {sorted(unknown)}")
        return cls(**raw)


TINY = AgentConfig(d_model=32, n_heads=4, text_layers=1, pano_layers=1, temporal_layers=1, crossmodal_layers=1)


@dataclass
class Conditioning:
    states: Tensor  # (B, L, d)
    mask: np.ndarray  # (B, L) bool
    kind: int  # TEXT or PATH

    def __len__(self):
        return self.states.shape[0]


@dataclass
class StateFeatures:
    """Numpy features of every visited state of a batch of trajectories."""

    view: np.ndarray  # (N, K, d_v)
    angle: np.ndarray  # (N, K, 4)
    cand_view: np.ndarray  # (N, C, d_v)
    cand_angle: np.ndarray  # (N, C, 4)
    cand_mask: np.ndarray  # (N, C)
    cand_target: np.ndarray  # (N, C), STOP for the stop slot and padding
    move_angle: np.ndarray  # (N, 4), angle of the move that entered the state
    offsets: np.ndarray  # (B,) index of each trajectory's first state
    lengths: np.ndarray  # (B,) visited-state count
    keys: list  # (env id, node, heading) per state


@dataclass
class StepOutput:
    action_logits: Tensor  # (R, C) with -inf-free padding; use cand_mask
    cand_mask: np.ndarray
    cand_target: np.ndarray
    value_estimate: Tensor  # (R,)
    fused_pooled: Tensor  # (R, d)
    cond_states: Tensor  # (R, Lc, d) after fusion
    rows: np.ndarray  # (R, 2) of (trajectory, step)
    state_index: np.ndarray  # (R,) row -> visited-state index


def trajectory_headings(env: Environment, nodes) -> list[float]:
    heads = [START_HEADING]
    for u, v in zip(nodes, nodes[1:]):
        heads.append(env.edge_heading(u, v))
    return heads


def _rel_quads(thetas: np.ndarray, phis: np.ndarray) -> np.ndarray:
    return np.stack([np.sin(thetas), np.cos(thetas), np.sin(phis), np.cos(phis)], axis=-1)


_BIN_HEADINGS = np.array([bin_heading(k) for k in range(K_VIEWS)])


def _state_features(env: Environment, node: int, heading: float):
    """Per-(node, heading) arrays, memoized on the environment."""
    cache = env.__dict__.setdefault("_state_feature_cache", {})
    key = (node, heading)
    hit = cache.get(key)
    if hit is None:
        nbs, eh, ee, ef = env.candidate_table[node]
        hit = (_rel_quads(_BIN_HEADINGS - heading, np.zeros(K_VIEWS)), ef, _rel_quads(eh - heading, ee), nbs)
        cache[key] = hit
    return hit


def featurize(trajectories) -> StateFeatures:
    """trajectories: list of (env, node list). Every visited node is a state."""
    views, angles, c_view, c_angle, c_target, moves, keys = [], [], [], [], [], [], []
    offsets, lengths = [], []
    for env, nodes in trajectories:
        offsets.append(len(views))
        lengths.append(len(nodes))
        heads = trajectory_headings(env, nodes)
        for t, node in enumerate(nodes):
            h = heads[t]
            angle, ef, ca, nbs = _state_features(env, node, h)
            views.append(env.features[node])
            angles.append(angle)
            c_view.append(ef)
            c_angle.append(ca)
            c_target.append(nbs)
            keys.append((env.id, node, h))
        turns = np.diff(np.asarray(heads))
        elev = np.array([env.edge_elevation(u, v) for u, v in zip(nodes, nodes[1:])])
        moves.append(np.zeros((1, 4)))
        if len(nodes) > 1:
            moves.append(_rel_quads(turns, elev))
    n = len(views)
    cmax = max(len(c) for c in c_target) + 1
    cand_view = np.zeros((n, cmax, D_VIEW))
    cand_angle = np.zeros((n, cmax, 4))
    cand_mask = np.zeros((n, cmax), dtype=bool)
    cand_target = np.full((n, cmax), STOP, dtype=np.int64)
    for i in range(n):
        k = len(c_target[i])
        cand_view[i, :k] = c_view[i]
        cand_angle[i, :k] = c_angle[i]
        cand_target[i, :k] = c_target[i]
        cand_mask[i, : k + 1] = True
    return StateFeatures(
        np.stack(views),
        np.stack(angles),
        cand_view,
        cand_angle,
        cand_mask,
        cand_target,
        np.concatenate(moves),
        np.array(offsets),
        np.array(lengths),
        keys,
    )


def stop_index(cand_mask_row: np.ndarray) -> int:
    return int(cand_mask_row.sum()) - 1


class NavAgent:
    def __init__(self, config: AgentConfig = AgentConfig(), seed: int = 0):
        self.config = config
        self.store = ParameterStore()
        self.rng: np.random.Generator | None = None
        self._init(np.random.default_rng(seed))

    # construction

    def _init(self, rng):
        c, s, d = self.config, self.store, self.config.d_model
        hidden = 4 * d
        s.add("stream_emb", rng.normal(0, 0.1, (2, d)))
        s.add("text.tok_emb", rng.normal(0, 0.1, (c.vocab_size, d)))
        s.add("text.pos_emb", rng.normal(0, 0.1, (c.max_instruction_len, d)))
        init_layer_norm(s, "text.ln", d)
        for i in range(c.text_layers):
            init_encoder_layer(s, f"text.layer{i}", d, hidden, rng)
        init_linear(s, "path.proj", c.d_v + 4, d, rng)
        s.add("path.pos_emb", rng.normal(0, 0.1, (c.max_path_len, d)))
        init_layer_norm(s, "path.ln", d)
        init_linear(s, "obs.view_proj", c.d_v, d, rng)
        # scaled as one projection of the concatenated (view, angle) input
        init_linear(s, "obs.angle_proj", 4, d, rng, fan_in=c.d_v + 4)
        init_layer_norm(s, "obs.ln", d)
        # path views start in the same embedding as observation views
        s.params["path.proj.W"].data[: c.d_v] = s.params["obs.view_proj.W"].data
        for i in range(c.pano_layers):
            init_encoder_layer(s, f"pano.layer{i}", d, hidden, rng)
        s.add("hist.cls", rng.normal(0, 0.1, (d,)))
        s.add("hist.step_emb", rng.normal(0, 0.1, (c.max_history_len + 1, d)))
        init_linear(s, "hist.move_proj", 4, d, rng)
        init_layer_norm(s, "hist.ln", d)
        for i in range(c.temporal_layers):
            init_encoder_layer(s, f"temporal.layer{i}", d, hidden, rng)
        for i in range(c.crossmodal_layers):
            p = f"xm.layer{i}"
            for part in ("c_cross", "v_cross", "c_self", "v_self"):
                init_attention(s, f"{p}.{part}", d, rng)
                if part.endswith("cross"):
                    # equal query/key maps start cross-attention as a similarity match
                    s.params[f"{p}.{part}.k.W"].data = s.params[f"{p}.{part}.q.W"].data.copy()
            init_ffn(s, f"{p}.c_ffn", d, hidden, rng)
            init_ffn(s, f"{p}.v_ffn", d, hidden, rng)
        s.add("xm.null", rng.normal(0, 0.1, (d,)))
        init_linear(s, "pool", 2 * d, d, rng)
        s.add("cand.stop", rng.normal(0, 0.1, (d,)))
        s.add("cand.type", rng.normal(0, 0.1, (d,)))
        init_linear(s, "cand.proj", d, d, rng)
        init_linear(s, "head.value", d, 1, rng)
        init_linear(s, "head.mlm", d, c.vocab_size, rng)
        init_linear(s, "head.itm", d, 1, rng)
        init_linear(s, "head.sar", d, 2, rng)
        # relative angle is a product of both views' headings, so a linear map on the pair cannot fit it
        init_linear(s, "head.sprel.hidden", 2 * d, d, rng)
        init_linear(s, "head.sprel", d, 2, rng)

    def train(self, rng: np.random.Generator) -> None:
        self.rng = rng

    def eval(self) -> None:
        self.rng = None

    @property
    def _drop(self) -> float:
        return self.config.dropout if self.rng is not None else 0.0

    def _dropout(self, x: Tensor) -> Tensor:
        return T.dropout(x, self._drop, self.rng)

    # conditioning encoders

    def encode_instruction(self, tokens) -> Conditioning:
        """tokens: one id sequence or a list of them (padded internally)."""
        if len(tokens) and isinstance(tokens[0], (int, np.integer)):
            tokens = [tokens]
        c = self.config
        L = max(len(t) for t in tokens)
        if L > c.max_instruction_len:
            raise AgentError(f"instruction of length {L} exceeds {c.max_instruction_len}")
        ids = np.full((len(tokens), L), PAD_ID, dtype=np.int64)
        for i, t in enumerate(tokens):
            t = np.asarray(t, dtype=np.int64)
            if t.size and (t.min() < 0 or t.max() >= c.vocab_size):
                raise AgentError("token id outside the vocabulary")
            ids[i, : len(t)] = t
        mask = ids != PAD_ID
        s = self.store
        x = T.take_rows(s["text.tok_emb"], ids) + s["text.pos_emb"][:L] + s["stream_emb"][TEXT]
        x = self._dropout(apply_layer_norm(s, "text.ln", x))
        key_mask = mask[:, None, :]
        for i in range(c.text_layers):
            x = encoder_layer(s, f"text.layer{i}", x, key_mask, c.n_heads, self._drop, self.rng)
        return Conditioning(x, mask, TEXT)

    def project_path(self, feats: Tensor) -> Tensor:
        """Affine map of concatenated (view, angle) features to model width."""
        return apply_linear(self.store, "path.proj", feats)

    def encode_masked_path(self, features, retained_positions) -> Conditioning:
        """features: per item a (k, d_v + 4) array, or a list of (view, angle)
        pairs; retained_positions: per item the original path index of each
        retained viewpoint."""
        if len(features) and isinstance(features[0], tuple):
            features, retained_positions = [features], [retained_positions]
        c = self.config
        arrs = [np.array([np.concatenate(p) for p in f]) if isinstance(f, list) else np.asarray(f) for f in features]
        L = max(len(a) for a in arrs)
        if L > c.max_path_len or min(len(a) for a in arrs) < 1:
            raise AgentError(f"masked path length must be in [1, {c.max_path_len}]")
        x = np.zeros((len(arrs), L, c.d_v + 4))
        pos = np.zeros((len(arrs), L), dtype=np.int64)
        mask = np.zeros((len(arrs), L), dtype=bool)
        for i, (a, p) in enumerate(zip(arrs, retained_positions)):
            x[i, : len(a)] = a
            pos[i, : len(a)] = p
            mask[i, : len(a)] = True
        if pos.max() >= c.max_path_len:
            raise AgentError("retained position beyond max_path_len")
        s = self.store
        h = self.project_path(Tensor(x)) + T.take_rows(s["path.pos_emb"], pos) + s["stream_emb"][PATH]
        h = self._dropout(apply_layer_norm(s, "path.ln", h))
        return Conditioning(h, mask, PATH)

    def masked_path_inputs(self, env: Environment, masked: MaskedPath):
        seq = facing_view_sequence(env, masked)
        return np.array([np.concatenate(p) for p in seq]), list(masked.positions)

    def encode_masked_paths(self, envs: dict, masked_paths) -> Conditioning:
        feats, positions = zip(*(self.masked_path_inputs(envs[m.env_id], m) for m in masked_paths))
        return self.encode_masked_path(list(feats), list(positions))

    # vision encoders

    def embed_views(self, view: np.ndarray, angle: np.ndarray) -> Tensor:
        s = self.store
        x = apply_linear(s, "obs.view_proj", Tensor(view)) + apply_linear(s, "obs.angle_proj", Tensor(angle))
        return apply_layer_norm(s, "obs.ln", x)

    def encode_panoramas(self, view: np.ndarray, angle: np.ndarray) -> Tensor:
        x = self._dropout(self.embed_views(view, angle))
        for i in range(self.config.pano_layers):
            x = encoder_layer(self.store, f"pano.layer{i}", x, None, self.config.n_heads, self._drop, self.rng)
        return x

    def encode_history(self, summaries: Tensor | None, move_angles: np.ndarray, lengths) -> Tensor:
        """summaries (B, Tmax, d) pooled past panoramas; move_angles (B, Tmax, 4)
        of the move taken after each; lengths (B,) valid steps. Returns
        (B, Tmax + 1, d), position 0 being the history [CLS]."""
        c, s = self.config, self.store
        lengths = np.asarray(lengths)
        B = len(lengths)
        tmax = int(lengths.max()) if B else 0
        if tmax > c.max_history_len:
            raise AgentError(f"history of {tmax} steps exceeds {c.max_history_len}")
        cls = T.reshape(s["hist.cls"], (1, 1, -1)) * np.ones((B, 1, 1))
        if tmax > 0:
            steps = summaries + apply_linear(s, "hist.move_proj", Tensor(move_angles))
            x = T.concat([cls, steps], axis=1)
        else:
            x = cls
        x = x + s["hist.step_emb"][: tmax + 1]
        x = self._dropout(apply_layer_norm(s, "hist.ln", x))
        valid = np.arange(tmax + 1)[None, :] <= lengths[:, None]
        causal = np.tril(np.ones((tmax + 1, tmax + 1), dtype=bool))[None] & valid[:, None, :]
        for i in range(c.temporal_layers):
            x = encoder_layer(s, f"temporal.layer{i}", x, causal, c.n_heads, self._drop, self.rng)
        return x

    def candidate_descriptors(self, cand_view, cand_angle, cand_mask) -> Tensor:
        """Candidate tokens from the observation projections; the STOP slot
        (last valid entry of each row) is a learned constant."""
        emb = self.embed_views(cand_view, cand_angle) + self.store["cand.type"]
        stop = np.zeros(cand_mask.shape)
        stop[np.arange(len(cand_mask)), cand_mask.sum(axis=1) - 1] = 1.0
        stop_w = stop[..., None]
        return emb * (1.0 - stop_w) + T.reshape(self.store["cand.stop"], (1, 1, -1)) * stop_w

    # fusion

    def fuse(self, cond: Tensor, cond_mask: np.ndarray, vis: Tensor, vis_mask: np.ndarray):
        c, s = self.config, self.store
        # learned null slot lets vision tokens attend to no conditioning token
        null = T.reshape(s["xm.null"], (1, 1, -1)) + Tensor(np.zeros((cond.shape[0], 1, c.d_model)))
        x = T.concat([cond, null], axis=1)
        ck = np.concatenate([cond_mask, np.ones((len(cond_mask), 1), dtype=bool)], axis=1)[:, None, :]
        vk = vis_mask[:, None, :]
        v = vis
        for i in range(c.crossmodal_layers):
            p = f"xm.layer{i}"
            xc = attention_block(s, f"{p}.c_cross", x, v, vk, c.n_heads, self._drop, self.rng)
            vc = attention_block(s, f"{p}.v_cross", v, x, ck, c.n_heads, self._drop, self.rng)
            x = attention_block(s, f"{p}.c_self", xc, xc, ck, c.n_heads, self._drop, self.rng)
            v = attention_block(s, f"{p}.v_self", vc, vc, vk, c.n_heads, self._drop, self.rng)
            x = ffn_block(s, f"{p}.c_ffn", x, self._drop, self.rng)
            v = ffn_block(s, f"{p}.v_ffn", v, self._drop, self.rng)
        pooled = T.tanh(apply_linear(s, "pool", T.concat([x[:, 0], v[:, 0]], axis=-1)))
        return pooled, x[:, :-1], v

    def score(self, pooled: Tensor, descriptors: Tensor, cand_mask: np.ndarray) -> Tensor:
        proj = apply_linear(self.store, "cand.proj", descriptors)
        logits = T.tsum(proj * T.reshape(pooled, (pooled.shape[0], 1, -1)), axis=-1)
        return logits * (cand_mask / math.sqrt(self.config.d_model))

    def value(self, pooled: Tensor) -> Tensor:
        return T.reshape(apply_linear(self.store, "head.value", pooled), (-1,))

    # batched step computation

    def forward(
        self, cond: Conditioning, trajectories, rows=None, feats: StateFeatures | None = None, pano_cache=None
    ) -> StepOutput:
        """Score every requested (trajectory, step) row.

        trajectories: list of (env, visited nodes), aligned with cond's batch.
        rows: (R, 2) array of (trajectory, step); defaults to every step.
        pano_cache: optional dict reused across calls to skip re-encoding
        panoramas; only valid without gradients and dropout.
        """
        if len(trajectories) != len(cond):
            raise AgentError("one conditioning item per trajectory is required")
        f = feats if feats is not None else featurize(trajectories)
        d = self.config.d_model
        if rows is None:
            rows = np.array([(b, t) for b, n in enumerate(f.lengths) for t in range(n)], dtype=np.int64)
        rows = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
        obs = self._panoramas(f, pano_cache)  # (N, K, d)
        pooled_pano = T.mean(obs, axis=1)  # (N, d)
        n = obs.shape[0]
        B = len(f.lengths)
        steps = f.lengths - 1
        tmax = int(steps.max())
        if tmax > 0:
            src = np.full((B, tmax), n, dtype=np.int64)
            mv = np.zeros((B, tmax, 4))
            for b in range(B):
                k = steps[b]
                src[b, :k] = f.offsets[b] + np.arange(k)
                mv[b, :k] = f.move_angle[f.offsets[b] + 1 : f.offsets[b] + 1 + k]
            padded = T.concat([pooled_pano, Tensor(np.zeros((1, d)))], axis=0)
            summaries = T.getitem(padded, src)
        else:
            summaries, mv = None, np.zeros((B, 0, 4))
        hist = self.encode_history(summaries, mv, steps)  # (B, tmax+1, d)

        rb, rt = rows[:, 0], rows[:, 1]
        state_index = f.offsets[rb] + rt
        hmax = int(rt.max())
        hist_rows = T.getitem(hist, (rb[:, None], np.arange(hmax + 1)[None, :]))
        hist_mask = np.arange(hmax + 1)[None, :] <= rt[:, None]
        cm = f.cand_mask[state_index]
        desc = self.candidate_descriptors(f.cand_view[state_index], f.cand_angle[state_index], cm)
        # candidates join the vision stream so they attend to the conditioning
        vis = T.concat([hist_rows, T.getitem(obs, state_index), desc], axis=1)
        vis_mask = np.concatenate([hist_mask, np.ones((len(rows), K_VIEWS), dtype=bool), cm], axis=1)
        cond_rows = T.getitem(cond.states, rb)
        cond_mask = cond.mask[rb]
        pooled, cond_out, vis_out = self.fuse(cond_rows, cond_mask, vis, vis_mask)
        n_c = cm.shape[1]
        fused_desc = T.getitem(vis_out, (slice(None), slice(vis_out.shape[1] - n_c, None)))
        return StepOutput(
            action_logits=self.score(pooled, fused_desc, cm),
            cand_mask=cm,
            cand_target=f.cand_target[state_index],
            value_estimate=self.value(pooled),
            fused_pooled=pooled,
            cond_states=cond_out,
            rows=rows,
            state_index=state_index,
        )

    def _panoramas(self, f: StateFeatures, cache) -> Tensor:
        if cache is None:
            return self.encode_panoramas(f.view, f.angle)
        if self.rng is not None or T.grad_enabled():
            raise AgentError("the panorama cache is for inference only")
        todo = [i for i, k in enumerate(f.keys) if k not in cache]
        if todo:
            enc = self.encode_panoramas(f.view[todo], f.angle[todo]).data
            for j, i in enumerate(todo):
                cache[f.keys[i]] = enc[j]
        return Tensor(np.stack([cache[k] for k in f.keys]))

    # auxiliary heads

    def mlm_head(self, text_states: Tensor) -> Tensor:
        return apply_linear(self.store, "head.mlm", text_states)

    def itm_head(self, pooled: Tensor) -> Tensor:
        return T.reshape(apply_linear(self.store, "head.itm", pooled), (-1,))

    def sar_head(self, pooled: Tensor) -> Tensor:
        return apply_linear(self.store, "head.sar", pooled)

    def sprel_head(self, view_i: Tensor, view_j: Tensor) -> Tensor:
        h = T.gelu(apply_linear(self.store, "head.sprel.hidden", T.concat([view_i, view_j], axis=-1)))
        return apply_linear(self.store, "head.sprel", h)

    # persistence

    def save(self, directory, with_optimizer: bool = True) -> None:
        directory = FsPath(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.json").write_text(self.config.to_json())
        self.store.save(directory / "model.mpmn", with_optimizer)

    @classmethod
    def load(cls, directory, expected: AgentConfig | None = None) -> "NavAgent":
        directory = FsPath(directory)
        config = AgentConfig.from_dict(json.loads((directory / "config.json").read_text()))
        if expected is not None and expected != config:
            raise AgentError(f"{directory}: checkpoint config does not match the requested config")
        agent = cls(config)
        agent.store.load(directory / "model.mpmn")
        return agent


def core_names(names) -> set[str]:
    return {n for n in names if not n.startswith(CORE_EXCLUDED_PREFIXES)}


def relative_angle_target(delta: float) -> np.ndarray:
    return np.array([math.sin(delta), math.cos(delta)])
