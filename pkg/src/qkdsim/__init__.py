"""Mode-multiplexed decoy-state time-bin BB84: simulator and finite-key engine."""

from qkdsim.channel import (
    ChannelError,
    ChannelState,
    DriftProcess,
    LanternSpec,
    channel_at,
    init_channel,
    pdl_factor,
    step_drift,
    transmission_probs,
)
from qkdsim.harness import (
    Acquisition,
    CalibrationError,
    EngineKind,
    HarnessError,
    ModeAggregate,
    OutputError,
    Scenario,
    SweepPoint,
    WindowedResult,
    WindowRecord,
    calibrate,
    emit_outputs,
    expected_block,
    expected_mode_probs,
    loss_sweep,
    mean_channel_state,
    run_scenario,
    window_trajectory,
)
from qkdsim.keyrate import (
    ChannelSummary,
    DecoyBounds,
    KeyRateResult,
    TallyBlock,
    decoy_bounds,
    optimize_parameters,
    qber,
    secret_key_length,
    sift,
    tallies_from_rates,
)
from qkdsim.link import (
    DetectionRecord,
    DetectorSpec,
    EngineCapacityError,
    LinkError,
    McRun,
    PulseRecord,
    ReceiverSpec,
    TallyRun,
    detector_process,
    generate_symbols,
    run_mc,
    run_tally,
    simulate_pulse,
    window_probabilities,
)
from qkdsim.protocol import (
    Basis,
    ConfigError,
    Intensity,
    ProtocolConfig,
    StateSymbol,
    binary_entropy,
    poisson_pn,
    rng_stream,
    tau_n,
    validate_config,
)

__version__ = "0.1.0"
