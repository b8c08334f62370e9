"""Hour-ahead load forecasting with DBSCAN anomaly cleaning and asymmetric-loss LSTMs."""

from .anomaly import ClusterLabeling, DbscanParams, InjectionSpec, dbscan, flag_anomalies, inject_outliers, substitute
from .evaluation import EvalReport, compare_experiments, error_histogram, split_rmse
from .losses import LossSpec, batch_loss, loss_al1, loss_al2, loss_grad, loss_mse
from .lstm import AdamState, LstmModel, TrainConfig, adam_step, init_model, lstm_backward, lstm_forward, predict, train
from .pipeline import ExperimentConfig, run_matrix, run_pipeline
from .synth import SynthSpec, generate
from .timeseries import MultiSeries, RobustScalerParams, SeasonalDataset, ingest_csv, make_windows, split_seasons

__version__ = "0.1.0"
