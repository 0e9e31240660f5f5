"""scikit-learn compatible wrappers.

``SidebandThermometer`` is the regressor: ``X`` rows are ``[eta, P(1), ...,
P(Q)]`` and ``y`` rows are ``[nbar, omega_t]``.  ``SpectrumSimulator`` and
``ProjectionNoise`` are transformers so that simulation, noise and the
regressor can be chained in a :class:`sklearn.pipeline.Pipeline`.
"""
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import neuralnet, physics
from .dataset import ParamBox, binomial_noise, scale_targets
from .exceptions import QMismatchError


class SidebandThermometer(RegressorMixin, BaseEstimator):
    """Neural estimator of mean phonon number and pulse area.

    Parameters
    ----------
    n_sidebands : int
        Number of blue sidebands Q in each input row (after ``eta``).
    hidden_width : int
        Neurons per hidden layer.
    activations : tuple of str
        One of ``"tanh"`` / ``"relu"`` per hidden layer.
    epochs, batch_size, learning_rate, lr_schedule :
        Adam training settings, see :class:`~ionthermo.neuralnet.TrainConfig`.
    noise_n : int or None
        If set, redraw binomial projection noise with this many measurements
        on the training populations every epoch.
    random_state : int
        Seeds initialization, shuffling and training noise.
    """

    def __init__(
        self,
        n_sidebands=10,
        hidden_width=1024,
        activations=neuralnet.DEFAULT_ACTIVATIONS,
        epochs=20,
        batch_size=256,
        learning_rate=1e-3,
        lr_schedule="cosine",
        noise_n=None,
        random_state=0,
        verbose=False,
    ):
        self.n_sidebands = n_sidebands
        self.hidden_width = hidden_width
        self.activations = activations
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.noise_n = noise_n
        self.random_state = random_state
        self.verbose = verbose

    def _train_config(self):
        return neuralnet.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_schedule=self.lr_schedule,
            noise_n=self.noise_n,
            seed=self.random_state,
        )

    def _validate(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != 2:
            raise ValueError(f"y must have two columns (nbar, omega_t), got shape {y.shape}")
        if X.shape[1] != self.n_sidebands + 1:
            raise QMismatchError(
                f"X has {X.shape[1]} columns, expected eta plus Q={self.n_sidebands} populations"
            )
        return X, y

    def fit(self, X, y):
        X, y = self._validate(X, y)
        model = neuralnet.init_model(
            self.n_sidebands, self.hidden_width, seed=self.random_state,
            n_hidden=len(self.activations), activations=self.activations,
        )
        return self._fit(model, X, y)

    def partial_fit(self, X, y):
        """Continue training the current network (fresh optimizer state)."""
        if not hasattr(self, "model_"):
            return self.fit(X, y)
        X, y = self._validate(X, y)
        return self._fit(self.model_, X, y)

    def _fit(self, model, X, y):
        targets = np.column_stack(scale_targets(y[:, 0], y[:, 1]))
        callback = (lambda e, l: print(f"epoch {e + 1}: loss {l:.5f}")) if self.verbose else None
        model.meta["box"] = {
            "nbar_range": [1.0, 1500.0],
            "eta_range": list(ParamBox().eta_range),
            "omega_t_range": list(ParamBox().omega_t_range),
        }
        self.model_, history = neuralnet.train(
            model, (X[:, 0], X[:, 1:], targets), self._train_config(), callback=callback
        )
        self.loss_curve_ = list(history)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model, **params):
        """Wrap an already trained :class:`~ionthermo.neuralnet.MlpModel`."""
        est = cls(
            n_sidebands=model.n_sidebands,
            hidden_width=model.layer_dims[1],
            activations=model.activations,
            **params,
        )
        est.model_ = model
        est.loss_curve_ = list(model.meta.get("loss_history", []))
        est.n_features_in_ = model.layer_dims[0]
        return est

    def predict(self, X):
        """``(n, 2)`` array of ``nbar`` and ``omega_t``, clipped to the training box."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return neuralnet.predict_batch(self.model_, X).values

    @property
    def meta(self):
        return self.model_.meta if hasattr(self, "model_") else {}


class SpectrumSimulator(TransformerMixin, BaseEstimator):
    """Map parameter rows ``[nbar, eta, omega_t]`` to inputs ``[eta, P(1), ..., P(Q)]``."""

    def __init__(self, n_sidebands=10, tail_epsilon=physics.DEFAULT_TAIL_EPSILON):
        self.n_sidebands = n_sidebands
        self.tail_epsilon = tail_epsilon

    def fit(self, X, y=None):
        check_array(X)
        return self

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 3:
            raise ValueError("expected columns nbar, eta, omega_t")
        pops = physics.spectra(X[:, 0], X[:, 1], X[:, 2], self.n_sidebands, self.tail_epsilon)
        return np.column_stack([X[:, 1], pops])


class ProjectionNoise(TransformerMixin, BaseEstimator):
    """Replace population columns (all but the first) by binomial estimates ``k / N``.

    Row ``i`` of every call is keyed by ``(random_state, i)``.
    """

    def __init__(self, n_measurements=100, random_state=0):
        self.n_measurements = n_measurements
        self.random_state = random_state

    def fit(self, X, y=None):
        check_array(X)
        return self

    def transform(self, X):
        X = check_array(X, dtype=np.float64, copy=True)
        X[:, 1:] = binomial_noise(X[:, 1:], self.n_measurements, self.random_state)
        return X
