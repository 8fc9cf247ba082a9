from liloc.factorgraph.factors import (
    ANCHOR,
    BIAS_WALK,
    KINDS,
    MARGINAL,
    ODOMETRY,
    PREINTEGRATION,
    SCAN_MATCH,
    STATE_PRIOR,
    BetweenFactor,
    BiasWalkFactor,
    Factor,
    FactorError,
    ImuFactor,
    MarginalPriorFactor,
    PriorFactor,
    bias_walk_information,
    diagonal_information,
    pose_information,
)
from liloc.factorgraph.graph import (
    ACTIVE_ANCHOR_SIGMA,
    PRIOR_ANCHOR_SIGMA,
    GraphError,
    JointGraph,
    MarginalInfo,
    OptimizeResult,
    SolverError,
    SolverParams,
)
from liloc.factorgraph.variables import (
    BIAS,
    POSE,
    VELOCITY,
    Key,
    bias_key,
    local,
    pose_key,
    retract,
    velocity_key,
)
