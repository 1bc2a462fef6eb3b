"""Attention connectivity: causal, fully bidirectional, and EOS-truncated.

Masks are dense boolean matrices, entry (i, j) meaning "position i may attend
to position j". The truncated regime wires a single bridge token between a
compression block (Block A: visual patches plus any query text) and a
reconstruction block (Block B: target text): every non-pad position reads the
bridge, the bridge reads only Block A and itself, and no other cross-block
edge exists. Information therefore flows A -> bridge -> B and never back,
which keeps Block-A states numerically independent of Block-B content at any
depth.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .autodiff import NEG_SENTINEL
from .errors import LayoutError


class Role(Enum):
    VISUAL_A = "VisualA"
    TEXT_A = "TextA"
    EOS_BRIDGE = "EosBridge"
    TEXT_B = "TextB"
    PAD = "Pad"


_ROLE_CHAR = {Role.VISUAL_A: "V", Role.TEXT_A: "T", Role.EOS_BRIDGE: "E",
              Role.TEXT_B: "B", Role.PAD: "P"}
_BLOCK_A = frozenset((Role.VISUAL_A, Role.TEXT_A))


@dataclass(frozen=True)
class SequenceLayout:
    """Role tag per position."""

    roles: tuple

    def __post_init__(self):
        object.__setattr__(self, "roles", tuple(self.roles))
        if len(self.roles) == 0:
            raise LayoutError("empty layout")
        for r in self.roles:
            if not isinstance(r, Role):
                raise LayoutError(f"not a role tag: {r!r}")
        # Pad must be a contiguous suffix
        in_pad = False
        for r in self.roles:
            if r is Role.PAD:
                in_pad = True
            elif in_pad:
                raise LayoutError("pad positions must form a contiguous suffix")

    @property
    def length(self) -> int:
        return len(self.roles)

    def indices(self, *roles: Role) -> list:
        want = set(roles)
        return [i for i, r in enumerate(self.roles) if r in want]

    @property
    def block_a(self) -> list:
        return self.indices(Role.VISUAL_A, Role.TEXT_A)

    @property
    def block_b(self) -> list:
        return self.indices(Role.TEXT_B)

    @property
    def non_pad(self) -> list:
        return [i for i, r in enumerate(self.roles) if r is not Role.PAD]

    def eos_index(self) -> int:
        eos = self.indices(Role.EOS_BRIDGE)
        if len(eos) != 1:
            raise LayoutError(f"expected exactly one bridge position, got {len(eos)}")
        return eos[0]

    def validate_truncated(self) -> int:
        """Check the bridge-layout invariants; returns the bridge index."""
        eos = self.eos_index()
        for i in self.block_a:
            if i > eos:
                raise LayoutError(f"block-A position {i} after bridge at {eos}")
        for i in self.block_b:
            if i < eos:
                raise LayoutError(f"block-B position {i} before bridge at {eos}")
        return eos


@dataclass(frozen=True)
class AttentionMask:
    allowed: np.ndarray  # N x N bool
    mode: str            # "causal" | "bidirectional" | "truncated"

    @property
    def n(self) -> int:
        return self.allowed.shape[0]

    def to_additive(self) -> np.ndarray:
        """0 where allowed, large negative sentinel where forbidden."""
        return np.where(self.allowed, 0.0, NEG_SENTINEL)


def build_causal(n: int) -> AttentionMask:
    if n < 1:
        raise LayoutError("empty layout")
    return AttentionMask(np.tril(np.ones((n, n), dtype=bool)), "causal")


def _pad_isolate(allowed: np.ndarray, layout: SequenceLayout) -> None:
    for p in layout.indices(Role.PAD):
        allowed[p, :] = False
        allowed[:, p] = False
        allowed[p, p] = True


def build_bidirectional(layout: SequenceLayout) -> AttentionMask:
    n = layout.length
    allowed = np.ones((n, n), dtype=bool)
    _pad_isolate(allowed, layout)
    return AttentionMask(allowed, "bidirectional")


def build_truncated(layout: SequenceLayout) -> AttentionMask:
    """One-way bridge: A and B are internally bidirectional, everyone reads
    the bridge, the bridge reads only A and itself. No other cross edges."""
    eos = layout.validate_truncated()
    n = layout.length
    allowed = np.zeros((n, n), dtype=bool)
    a = layout.block_a
    b = layout.block_b
    for i in a:
        allowed[i, a] = True
        allowed[i, eos] = True
    for i in b:
        allowed[i, b] = True
        allowed[i, eos] = True
    allowed[eos, a] = True
    allowed[eos, eos] = True
    _pad_isolate(allowed, layout)
    return AttentionMask(allowed, "truncated")


@dataclass(frozen=True)
class IsolationReport:
    passed: bool
    max_hops: int
    pairs_checked: int
    violating_path: Optional[tuple]  # (b, ..., a) read-order hops, or None

    def __str__(self) -> str:
        if self.passed:
            return (f"isolation ok: {self.pairs_checked} block pairs, "
                    f"paths up to {self.max_hops} hops all cross the bridge")
        path = " -> ".join(str(i) for i in self.violating_path)
        return f"isolation VIOLATED at <= {self.max_hops} hops: {path}"


def verify_isolation(mask: AttentionMask, layout: SequenceLayout,
                     layers: int) -> IsolationReport:
    """Check that within `layers` attention hops, every information path from
    Block B back into Block A runs through the bridge position.

    Treats the mask as a directed graph with an edge u -> v whenever u may
    attend (read) v, deletes the bridge node, and searches for any surviving
    read-path of length at most `layers` connecting the blocks, in either
    direction. BFS by increasing depth, so a reported violation is a shortest
    offending path.
    """
    eos = layout.eos_index()
    a_set = set(layout.block_a)
    b_set = set(layout.block_b)
    adj = mask.allowed.copy()
    adj[eos, :] = False
    adj[:, eos] = False
    np.fill_diagonal(adj, False)  # self-loops are not information flow
    pairs = len(a_set) * len(b_set)

    def search(sources, targets):
        best = None
        for src in sorted(sources):
            # parents[v] = predecessor on the shortest read-path from src
            parents = {src: None}
            frontier = [src]
            for _ in range(layers):
                nxt = []
                hit = None
                for u in frontier:
                    for v in np.flatnonzero(adj[u]):
                        v = int(v)
                        if v in parents:
                            continue
                        parents[v] = u
                        if v in targets and hit is None:
                            hit = v
                        nxt.append(v)
                if hit is not None:
                    path = [hit]
                    while path[-1] is not None:
                        path.append(parents[path[-1]])
                    path = tuple(reversed(path[:-1]))
                    if best is None or len(path) < len(best):
                        best = path
                    break
                frontier = nxt
        return best

    candidates = [p for p in (search(b_set, a_set), search(a_set, b_set)) if p]
    path = min(candidates, key=len) if candidates else None
    if path is not None:
        return IsolationReport(False, layers, pairs, path)
    return IsolationReport(True, layers, pairs, None)


# ---------------------------------------------------------------------------
# dump formats
# ---------------------------------------------------------------------------

ROLE_LEGEND = "V=VisualA T=TextA E=EosBridge B=TextB P=Pad"


def mask_to_ascii(mask: AttentionMask, layout: Optional[SequenceLayout] = None) -> str:
    """Role-legend header line, then one '1'/'0' row per position."""
    if layout is not None:
        tags = "".join(_ROLE_CHAR[r] for r in layout.roles)
    else:
        tags = "?" * mask.n
    lines = [f"roles {tags} ({ROLE_LEGEND})"]
    for row in mask.allowed:
        lines.append("".join("1" if v else "0" for v in row))
    return "\n".join(lines) + "\n"


def mask_to_pgm(mask: AttentionMask) -> str:
    """Plain portable graymap: 255 = allowed, 0 = forbidden."""
    n = mask.n
    lines = ["P2", f"{n} {n}", "255"]
    for row in mask.allowed:
        lines.append(" ".join("255" if v else "0" for v in row))
    return "\n".join(lines) + "\n"
