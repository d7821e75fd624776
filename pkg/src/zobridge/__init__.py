"""zobridge: end-to-end training of staged prediction pipelines that contain
opaque (forward-only) stages, using zeroth-order VJP estimators to bridge
gradients through them."""

from .backend import active_backend, use_backend
from .errors import (BackendError, ContractViolation, DatasetFormatError,
                     DivergenceError)
from .pipeline import (GradientBundle, LossSpec, PipelineState, backward,
                       backward_exact, batch_loss, forward_predict,
                       reconstruction_gradients, validate_boundaries)
from .rng import Rng, gaussian_vec
from .stages import (CompositeStage, DifferentiableStage, IdentityStage,
                     MlpStage, OpaqueStage, ParamBlock, SmoothMapStage, Stage,
                     TanhStage, ThresholdStage, make_reparameterized_middle)
from .train import (Adam, RunMetrics, Sgd, SupervisedTask, TrainConfig, clip,
                    pipeline_rmse, reconstruction_accuracy, rmse, stage1_train,
                    stage2_train)
from .wire import SubprocessStage, python_worker_argv, serve
from .zo import (ZoConfig, ZoQueryLog, zo_check, zo_jacobian, zo_vjp_input,
                 zo_vjp_params)

__version__ = "0.1.0"
