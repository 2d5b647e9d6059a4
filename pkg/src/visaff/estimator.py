"""scikit-learn style wrapper around the fusion head.

``X`` holds one row per utterance with the visual, text and audio features laid
side by side (widths given by ``modality_dims``). ``groups`` names the
conversation of each row; rows of a conversation must be contiguous and in
temporal order.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .fusion import MODALITY_KEYS, FusionParams
from .training import ConversationArrays, TrainConfig, fit_conversations, predict_batches


def check_modality_dims(modality_dims, n_features: int) -> tuple[int, int, int]:
    if modality_dims is None or len(modality_dims) != 3:
        raise ValueError("modality_dims must give three widths (visual, text, audio)")
    dims = tuple(int(d) for d in modality_dims)
    if min(dims) < 1:
        raise ValueError("modality widths must be positive")
    if sum(dims) != n_features:
        raise ValueError(f"modality_dims sum to {sum(dims)} but X has {n_features} columns")
    return dims


def check_groups(groups, n_samples: int) -> list[tuple[str, int, int]]:
    """Split ``groups`` into ``(name, start, stop)`` runs; a name may not reappear after its run ends."""
    if groups is None:
        return [("0", 0, n_samples)]
    groups = np.asarray(groups)
    if groups.ndim != 1 or groups.shape[0] != n_samples:
        raise ValueError(f"groups must be 1-D with {n_samples} entries")
    runs, seen = [], set()
    start = 0
    for i in range(1, n_samples + 1):
        if i == n_samples or groups[i] != groups[start]:
            name = str(groups[start])
            if name in seen:
                raise ValueError(f"rows of conversation {name!r} are not contiguous")
            seen.add(name)
            runs.append((name, start, i))
            start = i
    return runs


def _split(X: np.ndarray, y, runs, dims) -> list[ConversationArrays]:
    edges = np.cumsum((0,) + dims)
    out = []
    for name, a, b in runs:
        feats = {m: X[a:b, edges[k] : edges[k + 1]] for k, m in enumerate(MODALITY_KEYS)}
        out.append(ConversationArrays(name, feats, None if y is None else y[a:b]))
    return out


class VisaffClassifier(ClassifierMixin, BaseEstimator):
    """Reliability-gated fusion classifier over per-utterance feature rows."""

    def __init__(self, modality_dims=None, hidden=128, proj_dim=64, lambda_cl=0.1, lambda_aux=0.5,
                 tau_infonce=0.07, tau_supcon=0.1, learning_rate=1e-3, batch_size=8, epochs=30,
                 patience=10, gate="reliability", use_text=True, use_audio=True, retrieval="sequence",
                 random_state=0):
        self.modality_dims = modality_dims
        self.hidden = hidden
        self.proj_dim = proj_dim
        self.lambda_cl = lambda_cl
        self.lambda_aux = lambda_aux
        self.tau_infonce = tau_infonce
        self.tau_supcon = tau_supcon
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.gate = gate
        self.use_text = use_text
        self.use_audio = use_audio
        self.retrieval = retrieval
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            lambda_cl=self.lambda_cl, lambda_aux=self.lambda_aux, tau_infonce=self.tau_infonce,
            tau_supcon=self.tau_supcon, learning_rate=self.learning_rate, batch_size=self.batch_size,
            epochs=self.epochs, patience=self.patience, seed=int(self.random_state or 0), hidden=self.hidden,
            proj_dim=self.proj_dim, gate=self.gate, use_text=self.use_text, use_audio=self.use_audio,
            retrieval=self.retrieval,
        )

    def fit(self, X, y, groups=None, eval_set=None):
        """``eval_set=(X_val, y_val, groups_val)`` enables early stopping on its W-F1."""
        X, y = check_X_y(X, y, dtype=np.float64)
        dims = check_modality_dims(self.modality_dims, X.shape[1])
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.shape[0] < 2:
            raise ValueError("need at least two classes")
        config = self._config()
        train = _split(X, y_enc, check_groups(groups, X.shape[0]), dims)
        val = []
        if eval_set is not None:
            Xv, yv, gv = eval_set
            Xv, yv = check_X_y(Xv, yv, dtype=np.float64)
            check_modality_dims(dims, Xv.shape[1])
            index = {c: k for k, c in enumerate(self.classes_)}
            try:
                yv_enc = np.array([index[v] for v in yv])
            except KeyError as exc:
                raise ValueError(f"eval_set has unseen label {exc.args[0]!r}") from None
            val = _split(Xv, yv_enc, check_groups(gv, Xv.shape[0]), dims)
        result = fit_conversations(train, val, config, self.classes_.shape[0],
                                   [str(c) for c in self.classes_])
        self.params_: FusionParams = result.params
        self.training_log_ = result.log
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = X.shape[1]
        return self

    def _traces(self, X, groups):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        dims = check_modality_dims(self.modality_dims, X.shape[1])
        convs = _split(X, None, check_groups(groups, X.shape[0]), dims)
        return predict_batches(convs, self.params_, self._config().options())

    def decision_function(self, X, groups=None) -> np.ndarray:
        return np.stack([t.logits for t in self._traces(X, groups)])

    def predict_proba(self, X, groups=None) -> np.ndarray:
        z = self.decision_function(X, groups)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X, groups=None) -> np.ndarray:
        scores = self.decision_function(X, groups)
        return self.classes_[np.argmax(scores, axis=1)]

    def reliability(self, X, groups=None) -> np.ndarray:
        """Gate value ``c`` per row."""
        return np.array([t.c for t in self._traces(X, groups)])
