"""Closed-form recovery of scalar constitutive laws from binned channels.

The pipeline has two halves. First, samples (c, y) pooled from a trained
channel are reduced to a bin table: equal-width concentration bins, bin-mean
targets, thin bins dropped. Second, a risk-seeking policy-gradient search
over prefix expressions fits the table: an RNN proposes token sequences,
constants are tuned by golden-section coordinate sweeps, and only the top
(1 - epsilon) quantile of a batch contributes to the REINFORCE update, so
the policy chases its best discoveries instead of its average ones.

Rewards use the normalized error NRMSE = RMSE / std(bin means), mapped
through r = 1 / (1 + NRMSE); a domain violation anywhere on the table
(log of a non-positive value, overflow, division blow-up) scores zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from functools import cached_property

import numpy as np

from .autodiff import Tape, Tensor
from . import autodiff as ad
from .training import AdamState, TrainConfig, adam_update

_NONE = -1  # context index meaning "no parent/sibling"


# ----- bin tables -----


@dataclass(frozen=True)
class BinTable:
    centers: np.ndarray  # kept bin midpoints, increasing
    means: np.ndarray    # mean target per kept bin
    counts: np.ndarray   # samples per kept bin

    def __post_init__(self):
        if not (len(self.centers) == len(self.means) == len(self.counts)):
            raise ValueError("bin table columns differ in length")
        if len(self.centers) < 2:
            raise ValueError("need at least two populated bins")

    @cached_property
    def spread(self) -> float:
        return float(np.std(self.means))


def bin_analysis(
    c: np.ndarray,
    y: np.ndarray,
    n_bins: int = 50,
    lo: float | None = None,
    hi: float | None = None,
    min_count: int = 10,
) -> BinTable:
    """Equal-width bins over [lo, hi]; bins with >= min_count samples survive."""
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if c.shape != y.shape or c.size == 0:
        raise ValueError("need matching non-empty sample arrays")
    lo = float(np.min(c)) if lo is None else float(lo)
    hi = float(np.max(c)) if hi is None else float(hi)
    if not hi > lo:
        raise ValueError("degenerate bin range")
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, c, side="right") - 1, 0, n_bins - 1)
    inside = (c >= lo) & (c <= hi)
    centers, means, counts = [], [], []
    for b in range(n_bins):
        sel = inside & (idx == b)
        n = int(np.sum(sel))
        if n < min_count:
            continue
        centers.append(0.5 * (edges[b] + edges[b + 1]))
        means.append(float(np.mean(y[sel])))
        counts.append(n)
    return BinTable(np.asarray(centers), np.asarray(means), np.asarray(counts))


def exact_bin_table(fn, lo: float, hi: float, n_bins: int = 50) -> BinTable:
    """Table whose means are a known function sampled at bin midpoints."""
    edges = np.linspace(lo, hi, n_bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return BinTable(centers, np.asarray(fn(centers), dtype=np.float64),
                    np.full(n_bins, np.iinfo(np.int32).max, dtype=np.int64))


def channel_samples(
    model,
    traj,
    channel: int,
    t_min: float = 1.0,
    t_max: float = 9.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Pool (state, smoothed channel) cell samples over a time window."""
    from .afno import afno_forward
    from .fields import RealField
    from .hpe import kernel_consistency_map

    cs, ys = [], []
    for t, snap in zip(traj.times, traj.snapshots):
        if t < t_min - 1e-12 or t > t_max + 1e-12:
            continue
        u = Tensor(snap.values)
        feats = afno_forward(ad.stack([u]), model.level1, train=False)
        raw = RealField(model.grid, ad.take_channel(feats, channel).data)
        smooth = kernel_consistency_map(raw, snap, model.kernel)
        cs.append(snap.values.reshape(-1))
        ys.append(smooth.values.reshape(-1))
    if not cs:
        raise ValueError("no snapshots inside the sampling window")
    return np.concatenate(cs), np.concatenate(ys)


# ----- token library and expression evaluation -----


@dataclass(frozen=True)
class Token:
    name: str
    arity: int


DEFAULT_TOKENS = (
    Token("+", 2), Token("-", 2), Token("*", 2), Token("/", 2),
    Token("log", 1), Token("exp", 1), Token("c", 0), Token("const", 0),
)


@dataclass(frozen=True)
class TokenLibrary:
    tokens: tuple[Token, ...] = DEFAULT_TOKENS

    def __post_init__(self):
        names = [t.name for t in self.tokens]
        if len(set(names)) != len(names):
            raise ValueError("duplicate token names")

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, name: str) -> int:
        for i, t in enumerate(self.tokens):
            if t.name == name:
                return i
        raise KeyError(name)

    def arity(self, idx: int) -> int:
        return self.tokens[idx].arity

    @property
    def log_index(self) -> int | None:
        try:
            return self.index("log")
        except KeyError:
            return None

    @property
    def const_index(self) -> int | None:
        try:
            return self.index("const")
        except KeyError:
            return None


def parse_prefix(lib: TokenLibrary, names: list[str]) -> list[int]:
    return [lib.index(n) for n in names]


def _subtree_end(lib: TokenLibrary, tokens: list[int], start: int) -> int:
    """Index one past the subtree rooted at ``start``."""
    need, i = 1, start
    while need > 0:
        if i >= len(tokens):
            raise ValueError("truncated prefix sequence")
        need += lib.arity(tokens[i]) - 1
        i += 1
    return i


def is_complete(lib: TokenLibrary, tokens: list[int]) -> bool:
    try:
        return _subtree_end(lib, tokens, 0) == len(tokens)
    except ValueError:
        return False


def count_constants(lib: TokenLibrary, tokens: list[int]) -> int:
    ci = lib.const_index
    return 0 if ci is None else sum(1 for t in tokens if t == ci)


_OPCODES = {"c": 0, "const": 1, "+": 2, "-": 3, "*": 4, "/": 5, "log": 6, "exp": 7}


@dataclass(frozen=True)
class CompiledExpression:
    """Prefix sequence lowered to opcodes for repeated evaluation."""

    opcodes: tuple[int, ...]
    const_slots: tuple[int, ...]  # per position; -1 when not a constant
    n_consts: int


def compile_expression(lib: TokenLibrary, tokens: list[int]) -> CompiledExpression:
    if not is_complete(lib, tokens) or _subtree_end(lib, tokens, 0) != len(tokens):
        raise ValueError("not a single complete expression")
    ops, slots = [], []
    k = 0
    for t in tokens:
        name = lib.tokens[t].name
        if name not in _OPCODES:
            raise ValueError(f"token {name!r} has no evaluation rule")
        ops.append(_OPCODES[name])
        if name == "const":
            slots.append(k)
            k += 1
        else:
            slots.append(-1)
    return CompiledExpression(tuple(ops), tuple(slots), k)


def run_compiled(
    prog: CompiledExpression, consts: np.ndarray, c: np.ndarray
) -> np.ndarray | None:
    """Stack evaluation over the reversed program (prefix semantics).

    Returns None on any domain violation or non-finite value at any node;
    scalars stay scalar until the end to keep constant subtrees cheap.
    """
    ops = prog.opcodes
    slots = prog.const_slots
    stack: list = []
    push = stack.append
    pop = stack.pop
    with np.errstate(all="ignore"):
        for i in range(len(ops) - 1, -1, -1):
            op = ops[i]
            if op == 0:
                push(c)
                continue
            if op == 1:
                # np.float64, not float: scalar ops must yield inf/nan
                # under errstate instead of raising ZeroDivisionError
                push(np.float64(consts[slots[i]]))
                continue
            if op >= 6:  # unary
                a = pop()
                if op == 6:
                    if np.any(a <= 0.0):
                        return None
                    out = np.log(a)
                else:
                    out = np.exp(a)
            else:
                a = pop()
                b = pop()
                if op == 2:
                    out = a + b
                elif op == 3:
                    out = a - b
                elif op == 4:
                    out = a * b
                else:
                    out = a / b
            if not np.all(np.isfinite(out)):
                return None
            push(out)
    out = stack[0]
    if np.ndim(out) == 0:
        return np.full_like(np.asarray(c, dtype=np.float64), float(out))
    return out.copy() if out is c else out


def evaluate_expression(
    lib: TokenLibrary,
    tokens: list[int],
    consts: np.ndarray | list[float],
    c: np.ndarray,
) -> np.ndarray | None:
    """Vectorized prefix evaluation; None when any point leaves the domain."""
    prog = compile_expression(lib, tokens)
    consts = np.asarray(consts, dtype=np.float64)
    if consts.size != prog.n_consts:
        raise ValueError("constant count mismatch")
    return run_compiled(prog, consts, np.asarray(c, dtype=np.float64))


def render_infix(
    lib: TokenLibrary, tokens: list[int], consts: np.ndarray | list[float]
) -> str:
    consts = list(np.asarray(consts, dtype=np.float64))
    pos = 0
    kpos = 0

    def rec() -> str:
        nonlocal pos, kpos
        tok = lib.tokens[tokens[pos]]
        pos += 1
        if tok.arity == 0:
            if tok.name == "const":
                s = f"{consts[kpos]:.6g}"
                kpos += 1
                return s
            return tok.name
        if tok.arity == 1:
            return f"{tok.name}({rec()})"
        a = rec()
        b = rec()
        return f"({a} {tok.name} {b})"

    return rec()


# ----- scoring -----


def _nrmse_compiled(prog: CompiledExpression, consts, table: BinTable) -> float:
    pred = run_compiled(prog, consts, table.centers)
    if pred is None:
        return float("inf")
    with np.errstate(over="ignore"):
        err = float(np.sqrt(np.mean((pred - table.means) ** 2)))
    if not np.isfinite(err):
        return float("inf")
    spread = table.spread
    if spread <= 0.0:
        return 0.0 if err == 0.0 else float("inf")
    return err / spread


def nrmse(lib: TokenLibrary, tokens, consts, table: BinTable) -> float:
    consts = np.asarray(consts, dtype=np.float64)
    prog = compile_expression(lib, tokens)
    if consts.size != prog.n_consts:
        raise ValueError("constant count mismatch")
    return _nrmse_compiled(prog, consts, table)


def reward_from_nrmse(value: float) -> float:
    if not np.isfinite(value):
        return 0.0
    return 1.0 / (1.0 + value)


_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


def golden_section(fn, lo: float, hi: float, iters: int = 50) -> float:
    """Minimize a unimodal-ish scalar function by interval shrinking."""
    a, b = float(lo), float(hi)
    c_ = b - _INVPHI * (b - a)
    d_ = a + _INVPHI * (b - a)
    fc, fd = fn(c_), fn(d_)
    for _ in range(iters):
        if fc <= fd:
            b, d_, fd = d_, c_, fc
            c_ = b - _INVPHI * (b - a)
            fc = fn(c_)
        else:
            a, c_, fc = c_, d_, fd
            d_ = a + _INVPHI * (b - a)
            fd = fn(d_)
    return c_ if fc <= fd else d_


def fit_constants(
    lib: TokenLibrary,
    tokens: list[int],
    table: BinTable,
    lo: float = -10.0,
    hi: float = 10.0,
    iters: int = 50,
    sweeps: int = 3,
) -> tuple[np.ndarray, float]:
    """Coordinate-wise golden-section tuning of every constant slot."""
    prog = compile_expression(lib, tokens)
    n = prog.n_consts
    if n == 0:
        return np.zeros(0), _nrmse_compiled(prog, np.zeros(0), table)
    consts = np.ones(n)

    def objective(k: int, x: float) -> float:
        saved = consts[k]
        consts[k] = x
        val = _nrmse_compiled(prog, consts, table)
        consts[k] = saved
        return val

    n_sweeps = 1 if n == 1 else sweeps
    prev = np.inf
    for _ in range(n_sweeps):
        for k in range(n):
            consts[k] = golden_section(lambda x: objective(k, x), lo, hi, iters)
        err = _nrmse_compiled(prog, consts, table)
        if prev - err < 1e-12:  # a stalled sweep will not unstick
            break
        prev = err
    return consts, _nrmse_compiled(prog, consts, table)


# ----- policy network -----


@dataclass
class PolicyNet:
    lib: TokenLibrary
    w_xh: Tensor
    w_hh: Tensor
    b_h: Tensor
    w_ho: Tensor
    b_o: Tensor
    hidden: int = 32

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [
            ("w_xh", self.w_xh), ("w_hh", self.w_hh), ("b_h", self.b_h),
            ("w_ho", self.w_ho), ("b_o", self.b_o),
        ]

    @property
    def input_dim(self) -> int:
        return 2 * (len(self.lib) + 1)


def init_policy(lib: TokenLibrary, hidden: int = 32, seed: int = 0) -> PolicyNet:
    """Small random recurrence, zero output layer: the start policy is
    exactly uniform over whatever tokens the masks allow."""
    rng = np.random.default_rng(seed)
    din = 2 * (len(lib) + 1)
    return PolicyNet(
        lib=lib,
        w_xh=Tensor(0.1 * rng.standard_normal((din, hidden)), requires_grad=True),
        w_hh=Tensor(0.1 * rng.standard_normal((hidden, hidden)), requires_grad=True),
        b_h=Tensor(np.zeros(hidden), requires_grad=True),
        w_ho=Tensor(np.zeros((hidden, len(lib))), requires_grad=True),
        b_o=Tensor(np.zeros(len(lib)), requires_grad=True),
        hidden=hidden,
    )


def _context_onehot(lib: TokenLibrary, parent: int, sibling: int) -> np.ndarray:
    n = len(lib) + 1
    x = np.zeros(2 * n)
    x[parent if parent != _NONE else n - 1] = 1.0
    x[n + (sibling if sibling != _NONE else n - 1)] = 1.0
    return x


def token_mask(
    lib: TokenLibrary, parent: int, length: int, need: int, max_length: int
) -> np.ndarray:
    """Boolean validity of each token for the next slot.

    Budget rule: after placing a token of arity a, the sequence holds
    length+1 tokens and still owes need-1+a more, which must fit in
    max_length. Nesting rule: log may not sit directly under log.
    """
    mask = np.zeros(len(lib), dtype=bool)
    for i, tok in enumerate(lib.tokens):
        if length + 1 + (need - 1 + tok.arity) > max_length:
            continue
        if tok.name == "log" and parent == lib.log_index:
            continue
        mask[i] = True
    if not np.any(mask):
        raise RuntimeError("mask eliminated every token; max_length too small")
    return mask


class _TreeWalk:
    """Incremental preorder bookkeeping shared by sampling and scoring."""

    def __init__(self, lib: TokenLibrary):
        self.lib = lib
        self.stack: list[list[int]] = []  # [token, done, first_child, arity]
        self.length = 0
        self.need = 1  # leaves still owed; 0 means the tree closed
        self.done = False

    def context(self) -> tuple[int, int]:
        if not self.stack:
            return _NONE, _NONE
        top = self.stack[-1]
        parent = top[0]
        sibling = top[2] if top[1] >= 1 else _NONE
        return parent, sibling

    def push(self, token: int) -> None:
        if self.done:
            raise ValueError("expression already complete")
        arity = self.lib.arity(token)
        if self.stack and self.stack[-1][1] == 0:
            self.stack[-1][2] = token
        self.length += 1
        self.need += arity - 1
        if arity > 0:
            self.stack.append([token, 0, _NONE, arity])
        else:
            while self.stack:
                self.stack[-1][1] += 1
                if self.stack[-1][1] == self.stack[-1][3]:
                    self.stack.pop()
                else:
                    break
        self.done = self.need == 0

    def finished(self) -> bool:
        return self.done


def _np_policy_step(
    policy: PolicyNet, x: np.ndarray, h: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    h = np.tanh(x @ policy.w_xh.data + h @ policy.w_hh.data + policy.b_h.data)
    return h @ policy.w_ho.data + policy.b_o.data, h


def _masked_probs(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    z = z - np.max(z[mask])
    e = np.where(mask, np.exp(z), 0.0)
    return e / np.sum(e)


def sample_expression(
    policy: PolicyNet,
    rng: np.random.Generator,
    max_length: int = 24,
) -> list[int]:
    """Draw one complete prefix sequence from the masked policy."""
    lib = policy.lib
    walk = _TreeWalk(lib)
    h = np.zeros(policy.hidden)
    tokens: list[int] = []
    while not walk.finished():
        parent, sibling = walk.context()
        mask = token_mask(lib, parent, walk.length, walk.need, max_length)
        logits, h = _np_policy_step(policy, _context_onehot(lib, parent, sibling), h)
        probs = _masked_probs(logits, mask)
        tok = int(rng.choice(len(lib), p=probs))
        tokens.append(tok)
        walk.push(tok)
    return tokens


def sequence_likelihood(
    policy: PolicyNet, tokens: list[int], max_length: int = 24
) -> float:
    """Probability of generating ``tokens`` under the masked policy."""
    lib = policy.lib
    walk = _TreeWalk(lib)
    h = np.zeros(policy.hidden)
    p = 1.0
    for tok in tokens:
        parent, sibling = walk.context()
        mask = token_mask(lib, parent, walk.length, walk.need, max_length)
        if not mask[tok]:
            return 0.0
        logits, h = _np_policy_step(policy, _context_onehot(lib, parent, sibling), h)
        p *= float(_masked_probs(logits, mask)[tok])
        walk.push(tok)
    if not walk.finished():
        raise ValueError("incomplete token sequence")
    return p


def _t_log_prob_sum(
    policy: PolicyNet, tokens: list[int], max_length: int
) -> Tensor:
    """Tape-tracked sum of log-probabilities along one sequence."""
    lib = policy.lib
    walk = _TreeWalk(lib)
    h = Tensor(np.zeros((1, policy.hidden)))
    total = None
    for tok in tokens:
        parent, sibling = walk.context()
        mask = token_mask(lib, parent, walk.length, walk.need, max_length)
        x = Tensor(_context_onehot(lib, parent, sibling).reshape(1, -1))
        h = ad.tanh(x @ policy.w_xh + h @ policy.w_hh + policy.b_h)
        logits = h @ policy.w_ho + policy.b_o  # (1, |L|)
        penalty = Tensor(np.where(mask, 0.0, -1e9).reshape(1, -1))
        z = logits + penalty
        zmax = float(np.max(z.data))  # detached shift keeps exp in range
        lse = ad.log(ad.exp(z - zmax).sum()) + zmax
        pick = Tensor(np.eye(len(lib))[tok].reshape(1, -1))
        lp = (z * pick).sum() - lse
        total = lp if total is None else total + lp
        walk.push(tok)
    return total


# ----- search loop -----


@dataclass
class DSRConfig:
    batch: int = 500
    max_iters: int = 2000
    lr: float = 5e-4
    epsilon: float = 0.05
    max_length: int = 24
    hidden: int = 32
    seed: int = 0
    const_lo: float = -10.0
    const_hi: float = 10.0
    golden_iters: int = 50
    const_sweeps: int = 3
    tol: float = 1e-7

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError("epsilon must lie in (0, 1)")
        if self.batch < 2 or self.max_iters < 1 or self.max_length < 1:
            raise ValueError("bad search configuration")


def risk_filter(rewards: np.ndarray, epsilon: float) -> tuple[np.ndarray, float]:
    """Indices at or above the (1 - epsilon) empirical quantile, plus the
    quantile itself. Ties with the threshold are kept."""
    rewards = np.asarray(rewards, dtype=np.float64)
    q = float(np.quantile(rewards, 1.0 - epsilon))
    return np.flatnonzero(rewards >= q), q


def policy_update(
    policy: PolicyNet,
    sequences: list[list[int]],
    rewards: np.ndarray,
    baseline: float,
    state: AdamState,
    config: DSRConfig,
) -> float:
    """One REINFORCE ascent step on the kept sequences; returns the loss."""
    named = policy.named_tensors()
    for _, t in named:
        t.zero_grad()
    with Tape() as tape:
        total = None
        for seq, r in zip(sequences, rewards):
            adv = float(r - baseline)
            term = _t_log_prob_sum(policy, seq, config.max_length) * (-adv)
            total = term if total is None else total + term
        loss = total * (1.0 / max(len(sequences), 1))
    tape.backward(loss)
    adam_update(named, state, TrainConfig(lr=config.lr), epoch=0)
    return float(loss.data)


@dataclass
class DiscoveryResult:
    tokens: list[int]
    consts: np.ndarray
    nrmse: float
    reward: float
    expression: str
    iterations: int
    evaluations: int
    reward_history: np.ndarray = dc_field(repr=False, default=None)


def discover(
    table: BinTable,
    lib: TokenLibrary = TokenLibrary(),
    config: DSRConfig = DSRConfig(),
    stop_fn=None,
) -> DiscoveryResult:
    """Risk-seeking search for the expression behind a bin table.

    ``stop_fn(best)`` may end the run early once the incumbent satisfies an
    external criterion; the NRMSE tolerance applies either way.
    """
    policy = init_policy(lib, hidden=config.hidden, seed=config.seed)
    state = AdamState()
    cache: dict[tuple[int, ...], tuple[np.ndarray, float]] = {}
    best = DiscoveryResult([], np.zeros(0), float("inf"), 0.0, "", 0, 0)
    history = []
    evals = 0

    for it in range(config.max_iters):
        seqs = []
        for cand in range(config.batch):
            rng = np.random.default_rng([config.seed, it, cand])
            seqs.append(sample_expression(policy, rng, config.max_length))
        rewards = np.zeros(config.batch)
        for i, seq in enumerate(seqs):
            key = tuple(seq)
            if key not in cache:
                cache[key] = fit_constants(
                    lib, seq, table,
                    lo=config.const_lo, hi=config.const_hi,
                    iters=config.golden_iters, sweeps=config.const_sweeps,
                )
                evals += 1
            consts, err = cache[key]
            rewards[i] = reward_from_nrmse(err)
            if err < best.nrmse:
                best = DiscoveryResult(
                    list(seq), consts.copy(), err, rewards[i],
                    render_infix(lib, seq, consts), it + 1, evals,
                )
        history.append(float(np.max(rewards)))
        if best.nrmse < config.tol:
            break
        if stop_fn is not None and best.tokens and stop_fn(best):
            break
        keep, q = risk_filter(rewards, config.epsilon)
        policy_update(
            policy, [seqs[i] for i in keep], rewards[keep], q, state, config
        )

    return DiscoveryResult(
        best.tokens, best.consts, best.nrmse, best.reward, best.expression,
        it + 1, evals, np.asarray(history),
    )
