"""Miniature multimodal transformer.

Mixed patch/token sequences are embedded into one stream, run through a
pre-norm bidirectional-capable stack under an externally supplied attention
mask, and read out through three heads: a tied-nothing LM head for token
prediction, a shallow reconstruction head for patch regression, and the
bridge-token row as the sequence embedding.
"""

import io
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, LayoutError, ShapeError
from .masks import AttentionMask, Role, SequenceLayout

PAD_ID = 0
MASK_ID = 1
EOS_ID = 2
N_RESERVED = 3

CHECKPOINT_MAGIC = b"COCOA1"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    vocab_size: int = 512
    patch_dim: int = 12
    max_seq: int = 128
    mae_decoder_layers: int = 1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError(f"d_model {self.d_model} not divisible by "
                             f"n_heads {self.n_heads}")
        if self.vocab_size <= N_RESERVED:
            raise ShapeError(f"vocab_size {self.vocab_size} leaves no room "
                             f"beyond {N_RESERVED} reserved ids")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _block_param_names(prefix: str) -> list:
    names = [f"{prefix}.ln1.g", f"{prefix}.ln1.b"]
    for w in ("wq", "wk", "wv", "wo"):
        names += [f"{prefix}.attn.{w}", f"{prefix}.attn.b{w[1]}"]
    names += [f"{prefix}.ln2.g", f"{prefix}.ln2.b",
              f"{prefix}.mlp.w1", f"{prefix}.mlp.b1",
              f"{prefix}.mlp.w2", f"{prefix}.mlp.b2"]
    return names


def param_names(cfg: ModelConfig) -> list:
    names = ["tok_emb", "patch_proj", "pos_emb"]
    for i in range(cfg.n_layers):
        names += _block_param_names(f"enc{i}")
    names += ["final_ln.g", "final_ln.b", "lm_head"]
    for i in range(cfg.mae_decoder_layers):
        names += _block_param_names(f"dec{i}")
    names += ["dec_ln.g", "dec_ln.b", "pixel_head"]
    return names


def _param_shape(name: str, cfg: ModelConfig) -> tuple:
    d, h = cfg.d_model, 4 * cfg.d_model
    fixed = {"tok_emb": (cfg.vocab_size, d), "patch_proj": (cfg.patch_dim, d),
             "pos_emb": (cfg.max_seq, d), "lm_head": (d, cfg.vocab_size),
             "pixel_head": (d, cfg.patch_dim)}
    if name in fixed:
        return fixed[name]
    leaf = name.split(".", 1)[1]
    return {"ln1.g": (d,), "ln1.b": (d,), "ln2.g": (d,), "ln2.b": (d,),
            "g": (d,), "b": (d,),
            "attn.wq": (d, d), "attn.wk": (d, d), "attn.wv": (d, d),
            "attn.wo": (d, d), "attn.bq": (d,), "attn.bk": (d,),
            "attn.bv": (d,), "attn.bo": (d,),
            "mlp.w1": (d, h), "mlp.b1": (h,), "mlp.w2": (h, d),
            "mlp.b2": (d,)}[leaf]


class ModelParams:
    """Named parameter tensors in a fixed, checkpoint-stable order."""

    def __init__(self, cfg: ModelConfig, tensors: dict):
        self.cfg = cfg
        self._tensors = dict(tensors)
        expected = param_names(cfg)
        if list(self._tensors) != expected:
            raise ShapeError("parameter set does not match config")

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name in param_names(cfg):
            shape = _param_shape(name, cfg)
            if name == "pixel_head":
                # zero head: the initial reconstruction loss equals the
                # variance of the targets, a readable baseline
                data = np.zeros(shape)
            elif name.endswith(".g"):
                data = np.ones(shape)
            elif name.split(".")[-1].startswith("b"):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, 0.02, size=shape)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(cfg, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def names(self) -> list:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list:
        return list(self._tensors.values())

    def n_params(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: Tensor(v.data.copy(), requires_grad=True)
                                      for k, v in self._tensors.items()})


@dataclass
class HiddenStates:
    h: Tensor                 # seq_len x d_model, last layer
    layout: SequenceLayout

    def __post_init__(self):
        if self.h.shape[0] != self.layout.length:
            raise ShapeError(f"{self.h.shape[0]} rows for layout of length "
                             f"{self.layout.length}")


def embed_sequence(params: ModelParams, tokens, patches,
                   layout: SequenceLayout) -> Tensor:
    """Token rows via table lookup, visual rows via patch projection, plus a
    learned absolute position for every row."""
    cfg = params.cfg
    n = layout.length
    if n > cfg.max_seq:
        raise ShapeError(f"sequence length {n} exceeds max_seq {cfg.max_seq}")
    tokens = np.asarray(tokens)
    if tokens.shape != (n,):
        raise ShapeError(f"expected {n} token ids, got {tokens.shape}")
    patches = np.asarray(patches, dtype=np.float64)
    n_vis = len(layout.indices(Role.VISUAL_A))
    if n_vis and patches.shape != (n_vis, cfg.patch_dim):
        raise ShapeError(f"expected patch matrix ({n_vis}, {cfg.patch_dim}), "
                         f"got {patches.shape}")

    # contiguous same-modality runs keep the graph small
    parts = []
    vis_used = 0
    i = 0
    while i < n:
        is_vis = layout.roles[i] is Role.VISUAL_A
        j = i
        while j < n and (layout.roles[j] is Role.VISUAL_A) == is_vis:
            j += 1
        if is_vis:
            rows = Tensor(patches[vis_used:vis_used + (j - i)])
            parts.append(ad.matmul(rows, params["patch_proj"]))
            vis_used += j - i
        else:
            parts.append(ad.embedding_lookup(params["tok_emb"],
                                             tokens[i:j].tolist()))
        i = j
    h0 = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
    pos = ad.slice_ranges(params["pos_emb"], (0, n))
    return ad.add(h0, pos)


def _attention(params: ModelParams, prefix: str, x: Tensor,
               additive: Tensor) -> Tensor:
    cfg = params.cfg
    dh = cfg.d_model // cfg.n_heads
    q = ad.add(ad.matmul(x, params[f"{prefix}.attn.wq"]), params[f"{prefix}.attn.bq"])
    k = ad.add(ad.matmul(x, params[f"{prefix}.attn.wk"]), params[f"{prefix}.attn.bk"])
    v = ad.add(ad.matmul(x, params[f"{prefix}.attn.wv"]), params[f"{prefix}.attn.bv"])
    heads = []
    for hd in range(cfg.n_heads):
        cols = (hd * dh, (hd + 1) * dh)
        qh = ad.slice_ranges(q, None, cols)
        kh = ad.slice_ranges(k, None, cols)
        vh = ad.slice_ranges(v, None, cols)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
        probs = ad.masked_softmax(scores, additive)
        heads.append(ad.matmul(probs, vh))
    joined = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
    return ad.add(ad.matmul(joined, params[f"{prefix}.attn.wo"]),
                  params[f"{prefix}.attn.bo"])


def _mlp(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    hidden = ad.gelu(ad.add(ad.matmul(x, params[f"{prefix}.mlp.w1"]),
                            params[f"{prefix}.mlp.b1"]))
    return ad.add(ad.matmul(hidden, params[f"{prefix}.mlp.w2"]),
                  params[f"{prefix}.mlp.b2"])


def _prenorm_block(params: ModelParams, prefix: str, h: Tensor,
                   additive: Tensor) -> Tensor:
    x = ad.layer_norm(h, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    h = ad.add(h, _attention(params, prefix, x, additive))
    x = ad.layer_norm(h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return ad.add(h, _mlp(params, prefix, x))


def forward(params: ModelParams, h0: Tensor, mask: AttentionMask,
            layout: SequenceLayout) -> HiddenStates:
    cfg = params.cfg
    n = h0.shape[0]
    if mask.n != n:
        raise ShapeError(f"mask for {mask.n} positions on sequence of {n}")
    additive = Tensor(mask.to_additive())
    h = h0
    for i in range(cfg.n_layers):
        h = _prenorm_block(params, f"enc{i}", h, additive)
    h = ad.layer_norm(h, params["final_ln.g"], params["final_ln.b"])
    return HiddenStates(h, layout)


def lm_logits(params: ModelParams, states: HiddenStates, positions) -> Tensor:
    rows = ad.embedding_lookup(states.h, list(positions))
    return ad.matmul(rows, params["lm_head"])


def mae_decode(params: ModelParams, states: HiddenStates,
               masked_patch_positions) -> Tensor:
    """Shallow reconstruction head over the masked visual positions only,
    fully bidirectional among the selected set."""
    cfg = params.cfg
    positions = list(masked_patch_positions)
    for p in positions:
        if states.layout.roles[p] is not Role.VISUAL_A:
            raise LayoutError(f"position {p} has role "
                              f"{states.layout.roles[p].value}, not visual")
    if not positions:
        return Tensor(np.zeros((0, cfg.patch_dim)))
    h = ad.embedding_lookup(states.h, positions)
    additive = Tensor(np.zeros((len(positions), len(positions))))
    for i in range(cfg.mae_decoder_layers):
        h = _prenorm_block(params, f"dec{i}", h, additive)
    h = ad.layer_norm(h, params["dec_ln.g"], params["dec_ln.b"])
    return ad.matmul(h, params["pixel_head"])


def extract_eos_embedding(states: HiddenStates) -> Tensor:
    eos = states.layout.indices(Role.EOS_BRIDGE)
    if len(eos) != 1:
        raise LayoutError(f"expected exactly one bridge position, got {len(eos)}")
    row = ad.embedding_lookup(states.h, [eos[0]])
    return ad.reshape(row, [states.h.shape[1]])


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def _write_record(buf, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    buf.write(struct.pack("<I", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<I", dim))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path, params: ModelParams, meta: dict = None,
                    extras: dict = None) -> None:
    """Magic, length-prefixed JSON config record, then one length-prefixed
    named float64 array per parameter (extras appended after the model)."""
    record = {"model": params.cfg.to_dict(), "meta": dict(meta or {})}
    payload = json.dumps(record, sort_keys=True,
                         separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)
    for name, t in params.items():
        _write_record(buf, name, t.data)
    for name in sorted(extras or {}):
        _write_record(buf, name, np.asarray(extras[name], dtype=np.float64))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(b)}")
    return b


def load_checkpoint(path):
    """Returns (config, params, meta, extras)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (rec_len,) = struct.unpack("<I", _read_exact(f, 4))
        record = json.loads(_read_exact(f, rec_len).decode("utf-8"))
        cfg = ModelConfig.from_dict(record["model"])
        arrays = {}
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0]
                          for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(f, count * 8), dtype="<f8")
            arrays[name] = data.reshape(shape).astype(np.float64)
    tensors = {}
    for name in param_names(cfg):
        if name not in arrays:
            raise CheckpointError(f"missing parameter {name}")
        tensors[name] = Tensor(arrays.pop(name), requires_grad=True)
    return cfg, ModelParams(cfg, tensors), record["meta"], arrays
