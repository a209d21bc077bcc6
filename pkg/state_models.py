"""
Defines the meta-parameter snapshots of each meta-learner.

These models bundle the ParamSets that one meta-learner owns together with
its fixed hyperparameters. They are immutable values: an outer optimizer step
produces a new state rather than mutating the old one.
"""
from pydantic import BaseModel, ConfigDict, Field, model_validator

from data_models import MlpSpec
from models import ParamSet


class MetaStateBase(BaseModel):
    # ParamSet is not a pydantic type; allow it and freeze the snapshot.
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


class MetaSgdState(MetaStateBase):
    """Initialization theta and the elementwise update vector alpha (theta' = theta - alpha o grad)."""

    theta: ParamSet
    alpha: ParamSet

    @model_validator(mode="after")
    def _alpha_mirrors_theta(self) -> "MetaSgdState":
        if self.alpha.dims() != self.theta.dims() or self.alpha.names() != self.theta.names():
            raise ValueError("alpha must mirror theta's names and dims exactly")
        return self


class MamlState(MetaStateBase):
    """Initialization theta adapted by plain SGD with a fixed scalar learning rate."""

    theta: ParamSet
    alpha_scalar: float = Field(..., gt=0.0)
    inner_steps: int = Field(1, ge=0)


class LrLstmState(MetaStateBase):
    """
    LSTM learning-rate meta-learner over a shared/task-specific base-learner.

    `phi` holds one LSTM cell (w_*, u_*, b_* for gates i, f, o, g) and the
    readout (readout_w [H], readout_b [1]); the emitted rate is
    beta * sigmoid(readout_w . h + readout_b).
    """

    phi: ParamSet
    beta_scale: float = Field(..., gt=0.0)
    theta1: ParamSet
    theta2_init: ParamSet
    steps_T: int = Field(..., ge=1)
    hidden_size: int = Field(..., ge=1)
    split_layer: int = Field(..., ge=0)
    spec: MlpSpec
