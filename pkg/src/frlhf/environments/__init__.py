from frlhf.environments.mdp import (
    EnvironmentSpec,
    Trajectory,
    exact_value,
    horizon_for,
    policy_values,
    random_env,
    rollout,
    rollout_batch,
    shaped_reward_table,
    state_visitation,
    tabular_policy,
    value_iteration,
)
from frlhf.environments.quadratic import (
    FeedbackPull,
    QuadraticObjectiveSpec,
    make_quadratic_family,
    quadratic_objective_grad,
)
from frlhf.environments.recommender import (
    HIGH_RATING,
    PREDICT_HIGH,
    PREDICT_LOW,
    RatingTable,
    RecommenderEnv,
    make_recommender_env,
    make_recommender_federation,
)

__all__ = [
    "EnvironmentSpec",
    "FeedbackPull",
    "HIGH_RATING",
    "PREDICT_HIGH",
    "PREDICT_LOW",
    "QuadraticObjectiveSpec",
    "RatingTable",
    "RecommenderEnv",
    "Trajectory",
    "exact_value",
    "horizon_for",
    "make_quadratic_family",
    "make_recommender_env",
    "make_recommender_federation",
    "policy_values",
    "quadratic_objective_grad",
    "random_env",
    "rollout",
    "rollout_batch",
    "shaped_reward_table",
    "state_visitation",
    "tabular_policy",
    "value_iteration",
]
