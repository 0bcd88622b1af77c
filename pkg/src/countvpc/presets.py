"""Published estimates from the student absenteeism application.

Models 1-5: two-level Poisson, two-level NB2, three-level NB2, two-level
NB2 with sixteen covariates, and the same with a random FSM coefficient.
Where the software output reports more digits than the summary tables,
the longer values are used.
"""

from __future__ import annotations

from .model import Alpha, FixedEffects, LevelStructure, ModelFamily, ModelSpec, RandomCoefficient, RandomIntercept

COVARIATES = (
    "_cons",
    "quintile2",
    "quintile3",
    "quintile4",
    "quintile5",
    "spring",
    "winter",
    "autumn",
    "female",
    "mixed",
    "asian",
    "black",
    "other",
    "notenglish",
    "sen",
    "fsm",
)

_BETA_MODEL4 = (2.126, -0.051, -0.118, -0.222, -0.330, 0.026, 0.077, 0.112, 0.122,
                -0.073, -0.194, -0.422, -0.194, -0.244, 0.267, 0.377)
_BETA_MODEL5 = (2.126, -0.048, -0.116, -0.219, -0.326, 0.026, 0.078, 0.112, 0.122,
                -0.074, -0.198, -0.421, -0.195, -0.242, 0.267, 0.372)


def model1() -> ModelSpec:
    return ModelSpec(ModelFamily.POISSON, FixedEffects([2.085]), RandomIntercept(0.100))


def model2() -> ModelSpec:
    return ModelSpec(ModelFamily.NB2, FixedEffects([2.088]), RandomIntercept(0.093), Alpha(0.877))


def model3() -> ModelSpec:
    return ModelSpec(
        ModelFamily.NB2,
        FixedEffects([2.0860497]),
        RandomIntercept(0.08692447),
        Alpha(0.8766216),
        levels=LevelStructure.THREE,
        sigma2_v=0.00582819,
    )


def model4() -> ModelSpec:
    return ModelSpec(
        ModelFamily.NB2,
        FixedEffects(_BETA_MODEL4, COVARIATES),
        RandomIntercept(0.10259547),
        Alpha(0.78186163),
    )


def model5() -> ModelSpec:
    omega = [[0.11603906, -0.02662019], [-0.02662019, 0.03503611]]
    return ModelSpec(
        ModelFamily.NB2,
        FixedEffects(_BETA_MODEL5, COVARIATES),
        RandomCoefficient(omega, ("_cons", "fsm")),
        Alpha(0.77526043),
    )


PRESET_MODELS = {1: model1, 2: model2, 3: model3, 4: model4, 5: model5}
