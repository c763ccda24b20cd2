"""Training loop, optimizer, evaluation metrics, and small synthetic tasks.

Training is deterministic given the config seed: data order, parameter
initialization, and every update are driven by seeded generators, so two
runs with the same inputs produce bit-identical weights and logs.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import GradientError

DEFAULT_LR = {"adapter_only": 1e-3, "full_finetune": 1e-4}
MODES = ("adapter_only", "full_finetune")


@dataclass
class TrainConfig:
    """Hyper-parameters of one training run."""

    mode: str = "adapter_only"
    seed: int = 0
    learning_rate: float | None = None  # None: 1e-3 adapter_only, 1e-4 full_finetune
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 16
    max_steps: int = 500

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.learning_rate is not None and self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def resolved_learning_rate(self):
        return DEFAULT_LR[self.mode] if self.learning_rate is None else self.learning_rate


class Adam(object):
    """Adam with bias correction; updates only tensors that received a gradient."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        """Apply one update from a {tensor: gradient array} mapping."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise GradientError(f"gradient shape {g.shape} vs parameter {p.data.shape}")
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[i] / c1
            v_hat = self._v[i] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


# ---------------------------------------------------------------------------
# synthetic tasks

TASKS = ("majority-token", "parity-of-token", "copy-first-label")

# token alphabet zones, chosen once so tasks stay inside a 128-token vocab
_MARKER = 0  # constant first token for tasks labeled by aggregate content
_MAJ_A, _MAJ_B = 1, 2
_COPY_TOKENS = (3, 4)
_PARITY_WINDOW = (10, 26)  # the designated token is drawn from [10, 26)
_NOISE_RANGE = (32, 128)
_MAJORITY_MARGIN = 0.7  # the dominant token fills at least this share of the body


@dataclass(frozen=True)
class ToyTask:
    """A deterministic synthetic labeling task over token id sequences.

    majority-token: a constant marker token leads, then every position
    holds token 1 or token 2; the label says whether token 1 occurs more
    often than token 2. The winner fills at least 70 percent of the body
    and the body length is odd, so ties cannot happen. The marker keeps
    the pooled position itself uninformative: the label is only readable
    from the aggregate content behind it.

    parity-of-token: the designated first position holds a token from a
    16-token window and the label is that token id's parity; the rest of
    the sequence is noise. Toggling the designated token to a neighbor
    flips the label by construction.

    copy-first-label: the first token is 3 or 4 and the label mirrors it.
    """

    name: str
    seed: int
    seq_len: int = 16
    vocab_size: int = 128

    def __post_init__(self):
        if self.name not in TASKS:
            raise ValueError(f"unknown task {self.name!r}; valid: {TASKS}")
        if self.seq_len < 4 or self.seq_len % 2 != 0:
            raise ValueError("seq_len must be an even number >= 4 (odd majority body)")
        if self.vocab_size < _NOISE_RANGE[0] + 1:
            raise ValueError(f"vocab_size must be > {_NOISE_RANGE[0]}")

    @property
    def label_rule(self):
        return {
            "majority-token": f"label 1 iff token {_MAJ_A} occurs more often than token {_MAJ_B}",
            "parity-of-token": "label = parity of the token id at position 0",
            "copy-first-label": f"label 0 iff the first token is {_COPY_TOKENS[0]}, 1 iff {_COPY_TOKENS[1]}",
        }[self.name]

    def label_of(self, sequence):
        """Apply the labeling rule directly to one sequence."""
        seq = list(sequence)
        if self.name == "majority-token":
            return int(seq.count(_MAJ_A) > seq.count(_MAJ_B))
        if self.name == "parity-of-token":
            return seq[0] % 2
        return _COPY_TOKENS.index(seq[0])

    def _sample(self, rng, label):
        def noise(k):
            return rng.integers(_NOISE_RANGE[0], min(_NOISE_RANGE[1], self.vocab_size), size=k)

        if self.name == "majority-token":
            body = self.seq_len - 1
            lo = int(np.ceil(_MAJORITY_MARGIN * body))
            count = int(rng.integers(lo, body + 1))
            major, minor = (_MAJ_A, _MAJ_B) if label else (_MAJ_B, _MAJ_A)
            rest = np.full(body, minor)
            rest[:count] = major
            rng.shuffle(rest)
            seq = np.concatenate(([_MARKER], rest))
        elif self.name == "parity-of-token":
            seq = noise(self.seq_len)
            window = np.arange(*_PARITY_WINDOW)
            seq[0] = rng.choice(window[window % 2 == label])
        else:  # copy-first-label
            seq = noise(self.seq_len)
            seq[0] = _COPY_TOKENS[label]
        return [int(t) for t in seq]

    def _generate(self, rng, n, taken):
        """n fresh examples, exactly balanced, none colliding with ``taken``."""
        if n < 2 or n % 2 != 0:
            raise ValueError("split sizes must be even numbers >= 2")
        sequences, labels = [], []
        for label in (0, 1):
            made = 0
            while made < n // 2:
                seq = self._sample(rng, label)
                key = tuple(seq)
                if key in taken:
                    continue
                taken.add(key)
                sequences.append(seq)
                labels.append(label)
                made += 1
        order = rng.permutation(n)
        return [sequences[i] for i in order], [labels[i] for i in order]

    def datasets(self, train_size=256, dev_size=64):
        """Disjoint train and dev splits, each with exactly half per label."""
        rng = np.random.default_rng(np.random.SeedSequence(self.seed))
        taken = set()
        train_seqs, train_labels = self._generate(rng, train_size, taken)
        dev_seqs, dev_labels = self._generate(rng, dev_size, taken)
        return train_seqs, train_labels, dev_seqs, dev_labels


def generate_toy_task(name, seed, seq_len=16, vocab_size=128):
    return ToyTask(name=name, seed=seed, seq_len=seq_len, vocab_size=vocab_size)


def toggle_parity_token(sequence):
    """Move the designated token to a parity sibling; the label flips."""
    seq = list(sequence)
    t = seq[0]
    lo, hi = _PARITY_WINDOW
    seq[0] = t + 1 if t + 1 < hi else t - 1
    return seq


# ---------------------------------------------------------------------------
# metrics


def accuracy(predicted, gold):
    p, g = np.asarray(predicted), np.asarray(gold)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
    if p.size == 0:
        raise ValueError("cannot score an empty split")
    return float((p == g).mean())


def f1_score(predicted, gold, positive=1):
    """Binary F1 for the given positive label; empty denominators score 0."""
    p, g = np.asarray(predicted), np.asarray(gold)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
    if p.size == 0:
        raise ValueError("cannot score an empty split")
    tp = int(((p == positive) & (g == positive)).sum())
    fp = int(((p == positive) & (g != positive)).sum())
    fn = int(((p != positive) & (g == positive)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _average_ranks(values):
    x = np.asarray(values, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # ties share the average rank
        i = j + 1
    return ranks


def spearman(a, b):
    """Spearman rank correlation with average ranks for ties; degenerate -> 0."""
    xa, xb = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if xa.shape != xb.shape:
        raise ValueError(f"length mismatch: {xa.shape} vs {xb.shape}")
    if xa.size == 0:
        raise ValueError("cannot score an empty split")
    if xa.size < 2:
        return 0.0
    ra = _average_ranks(xa) - (xa.size + 1) / 2.0
    rb = _average_ranks(xb) - (xb.size + 1) / 2.0
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0.0:
        return 0.0
    return float((ra * rb).sum() / denom)


def evaluate(model, sequences, labels, head=None):
    """Loss plus accuracy/F1/Spearman of argmax predictions on a labeled set."""
    if not sequences:
        raise ValueError("cannot evaluate an empty split")
    logits = model.batch_logits(sequences, head)
    loss = ad.cross_entropy(logits, labels)
    predicted = [int(i) for i in np.argmax(logits.data, axis=1)]
    return {
        "loss": float(loss.data),
        "accuracy": accuracy(predicted, labels),
        "f1": f1_score(predicted, labels),
        "spearman": spearman(predicted, labels),
    }


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    mode: str
    steps: int
    losses: list = field(default_factory=list)
    final_loss: float = float("nan")
    dev_metrics: dict | None = None

    def to_dict(self):
        out = {"mode": self.mode, "steps": self.steps, "final_loss": self.final_loss}
        if self.dev_metrics is not None:
            out["dev"] = dict(self.dev_metrics)
        return out


class _Batcher:
    """Cycle through a dataset in shuffled full batches, reshuffling per epoch."""

    def __init__(self, n, batch_size, rng):
        if n < 1:
            raise ValueError("dataset is empty")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next_indices(self):
        if self._pos + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def run_training(model, sequences, labels, config, adapter_name=None, head=None,
                 dev_sequences=None, dev_labels=None):
    """Train the model on a labeled dataset.

    In adapter_only mode the backbone freezes and only the named adapters
    (``adapter_name`` may be one name or a list; omitted, the model's
    already-active stack is used) plus the heads receive updates. In
    full_finetune mode every backbone tensor trains and no adapter is
    activated. The recorded loss at each step is computed before that
    step's update, so ``losses[0]`` is the untrained model's loss.
    """
    if len(sequences) != len(labels):
        raise ValueError(f"{len(sequences)} sequences vs {len(labels)} labels")
    if config.mode == "adapter_only":
        if adapter_name is None:
            names = list(model.active_adapters)
            if not names:
                raise ValueError("adapter_only mode needs adapter_name or an active stack")
        else:
            names = [adapter_name] if isinstance(adapter_name, str) else list(adapter_name)
        model.train_adapter(names)
    else:
        names = []
        model.train_full()

    head_obj = model.get_head(head)
    params = [t for _, t, _ in model.named_parameters(trainable_only=True)]
    optimizer = Adam(params, lr=config.resolved_learning_rate(), beta1=config.beta1,
                     beta2=config.beta2, epsilon=config.adam_epsilon)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    batcher = _Batcher(len(sequences), config.batch_size, rng)
    labels_arr = np.asarray(labels, dtype=np.intp)

    result = TrainResult(mode=config.mode, steps=config.max_steps)
    for _ in range(config.max_steps):
        idx = batcher.next_indices()
        batch_seqs = [sequences[i] for i in idx]
        batch_labels = labels_arr[idx]
        with ad.Tape():
            logits = model.batch_logits(batch_seqs, head_obj.name)
            loss = ad.cross_entropy(logits, batch_labels)
            grads = ad.backward(loss)
        optimizer.step(grads)
        result.losses.append(float(loss.data))

    result.final_loss = result.losses[-1]
    for name in names:
        model.get_adapter(name).trained = True
    if dev_sequences is not None:
        result.dev_metrics = evaluate(model, dev_sequences, dev_labels, head_obj.name)
    return result
