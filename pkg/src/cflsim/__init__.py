"""cflsim: desk-scale simulator for collaborative (server-less) federated
learning over wireless IoT networks.

The pieces compose bottom-up: ``graph`` builds topologies and mixing
matrices, ``channel`` prices each wireless link, ``model`` trains the
local learner, ``quant`` compresses model vectors, ``protocol`` runs the
synchronous rounds, ``metrics`` scores runs and ``cli``/``scenario``
drive everything from a configuration file.
"""

from .channel import ChannelParams, DeviceRadio, LinkStats
from .graph import (
    BoundParams,
    MixingMatrix,
    NetworkGraph,
    build_mixing,
    build_topology,
    is_connected,
    iteration_bound,
    lazify,
    load_edge_list,
    load_edge_list_file,
    metropolis_weights,
    second_eigenvalue,
    spectral_pn,
    uniform_weights,
    with_base_station,
)
from .metrics import (
    EnergyTotals,
    ReliabilityEstimate,
    accuracy_at_time,
    convergence_time,
    energy_totals,
    evaluate_model,
    reliability,
    wilson_interval,
)
from .model import (
    Dataset,
    ModelParams,
    ModelShapes,
    TrainConfig,
    TrainingDivergedError,
    accuracy,
    average_params,
    gd_steps,
    grad,
    init_params,
    load_idx,
    loss,
    synth_data,
)
from .protocol import (
    DataSpec,
    RoundOutcome,
    RoundReport,
    RunResult,
    ScenarioConfig,
    SchedulePolicy,
    UplinkCheck,
    build_state,
    cfl_round,
    equivalence_check,
    ofl_round,
    param_mean,
    param_spread,
    run_experiment,
    schedule,
)
from .quant import QuantizedBlob, decode, encode, payload_bits, payload_bits_for

__version__ = "0.1.0"
