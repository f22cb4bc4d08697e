"""scikit-learn style wrapper around training, prediction and evaluation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import nn_opf, oracle_eval
from .case_io import Network, load_case
from .trainer import TrainConfig, Trainer


class OPFRegressor(RegressorMixin, BaseEstimator):
    """Label-free OPF surrogate.

    ``fit`` ignores ``y``: targets are never used, the loss is built from the
    power-flow physics of ``case``.  ``X`` is optional and only checked for
    width.  ``predict`` maps load perturbations ``u`` (one row per scenario) to
    ``[V (n), theta (n), P_g (n_g)]`` rows.
    """

    def __init__(self, case="case14", epochs=5000, preset="desk", seed=0, batch_size=64,
                 hidden_dim=None, n_layers=None, out_dir=None):
        self.case = case
        self.epochs = epochs
        self.preset = preset
        self.seed = seed
        self.batch_size = batch_size
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.out_dir = out_dir

    def _network(self) -> Network:
        return self.case if isinstance(self.case, Network) else load_case(self.case)

    def _train_config(self, network: Network) -> TrainConfig:
        if self.preset == "paper":
            return TrainConfig.paper(network, seed=self.seed, batch_size=self.batch_size)
        if self.preset == "desk":
            return TrainConfig.desk(network, epochs=self.epochs, seed=self.seed, batch_size=self.batch_size)
        raise ValueError(f"unknown preset {self.preset!r}; expected 'desk' or 'paper'")

    def fit(self, X=None, y=None):
        network = self._network()
        if X is not None:
            X = check_array(X, dtype=np.float64)
            if X.shape[1] != network.input_dim:
                raise ValueError(f"X has {X.shape[1]} features, {network.name} expects {network.input_dim}")
        config = self._train_config(network)
        mlp = nn_opf.auto_config(network)
        if self.hidden_dim is not None or self.n_layers is not None:
            mlp = nn_opf.MlpConfig(mlp.input_dim, mlp.output_dim,
                                   self.hidden_dim or mlp.hidden_dim, self.n_layers or mlp.n_layers)
        result = Trainer(network, config, mlp).run(self.out_dir)
        self.network_ = network
        self.params_ = result.params
        self.mlp_config_ = result.config
        self.multipliers_ = result.multipliers
        self.records_ = result.records
        self.stop_reason_ = result.stop_reason
        self.n_features_in_ = network.input_dim
        return self

    @classmethod
    def from_checkpoint(cls, path, case=None) -> "OPFRegressor":
        header, config, params, _ = nn_opf.load_checkpoint(path)
        est = cls(case=case or header["case"])
        est.network_ = est._network()
        est.params_ = params
        est.mlp_config_ = config
        est.records_ = []
        est.n_features_in_ = config.input_dim
        return est

    def _check_X(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def decode(self, X):
        """Decoded ``(SystemState, Dispatch)`` with a leading scenario axis."""
        X = self._check_X(X)
        return oracle_eval.predict(self.params_, self.network_, X)

    def predict(self, X):
        state, dispatch = self.decode(X)
        return np.hstack([np.asarray(state.v), np.asarray(state.theta), np.asarray(dispatch.p_g)])

    def evaluate(self, X, reference=None) -> oracle_eval.EvalReport:
        X = self._check_X(X)
        return oracle_eval.evaluate(self.params_, self.network_, X, reference)

    def score(self, X, y=None, sample_weight=None):
        """Negative mean residual-norm metric (higher is better); ``y`` is ignored."""
        return -self.evaluate(X).residual_norm_metric
