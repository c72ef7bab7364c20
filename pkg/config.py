# Configuration for the EVCS control testbed
# Uses environment variables for run-wide settings and a YAML document for experiments

import os
import hashlib
import json
from dataclasses import dataclass, field, asdict, replace
from typing import Any, Dict, List, Optional, Tuple

import yaml
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Reproducibility and output
SEED = int(os.getenv('EVCS_SEED', '1'))
OUTPUT_DIR = os.getenv('EVCS_OUTPUT_DIR', 'results')
TIMEZONE = os.getenv('EVCS_TIMEZONE', 'UTC')

# Solver settings
LP_ENGINE = os.getenv('EVCS_LP_ENGINE', 'highs')
SOLVER_BACKEND = os.getenv('EVCS_SOLVER_BACKEND', 'bnb')
NODE_BUDGET = int(os.getenv('EVCS_NODE_BUDGET', '10000'))
MIP_GAP = float(os.getenv('EVCS_MIP_GAP', '1e-6'))
DUMP_LP_DIR = os.getenv('EVCS_DUMP_LP_DIR', '')

# Execution
MAX_WORKERS = int(os.getenv('EVCS_MAX_WORKERS', '4'))
VERBOSE = os.getenv('EVCS_VERBOSE', '1') not in ('0', 'false', 'False', '')

# Station defaults of the reference experiment
DEFAULT_N_SLOTS = 32
DEFAULT_DT_MINUTES = 15
DEFAULT_E_MAX = 3.0
DEFAULT_THRESHOLD_SHARE = 0.08
DEFAULT_XI = 14.31
DEFAULT_ETA = 0.91
DEFAULT_ALPHA = 5000.0
DEFAULT_HORIZON = 40
OFF_PEAK_PRICE = 0.102
PEAK_PRICE = 0.153
OFF_PEAK_HOURS = ((0, 6), (9, 11), (13, 17), (21, 24))

LP_ENGINES = ('highs', 'simplex')
SOLVER_BACKENDS = ('bnb', 'highs-milp')
SOLVER_OPTIONS = ('backend', 'lp_engine', 'budget', 'gap')
POLICY_NAMES = ('2s', 'mpc', 'rmpc', 'pmpc')


def validate_config():
    """Validate that the environment settings are usable"""
    problems = []

    if LP_ENGINE not in LP_ENGINES:
        problems.append(f"EVCS_LP_ENGINE must be one of {LP_ENGINES}, got '{LP_ENGINE}'")
    if SOLVER_BACKEND not in SOLVER_BACKENDS:
        problems.append(f"EVCS_SOLVER_BACKEND must be one of {SOLVER_BACKENDS}, got '{SOLVER_BACKEND}'")
    if NODE_BUDGET < 1:
        problems.append("EVCS_NODE_BUDGET must be at least 1")
    if not 0 < MIP_GAP < 1:
        problems.append("EVCS_MIP_GAP must be in (0, 1)")
    if MAX_WORKERS < 1:
        problems.append("EVCS_MAX_WORKERS must be at least 1")

    if problems:
        print("❌ Invalid environment settings:")
        for problem in problems:
            print(f"   - {problem}")
        print("\n💡 Please update your .env file (see .env.example).")
        return False

    print("✅ Environment settings are valid.")
    return True


def reference_price_schedule(dt_minutes=DEFAULT_DT_MINUTES):
    """Peak/off-peak price per step of day (EUR/kWh)"""
    steps_per_day = 24 * 60 // dt_minutes
    prices = []
    for step in range(steps_per_day):
        hour = (step * dt_minutes) // 60
        off_peak = any(start <= hour < end for start, end in OFF_PEAK_HOURS)
        prices.append(OFF_PEAK_PRICE if off_peak else PEAK_PRICE)
    return tuple(prices)


def reference_station_config(n=DEFAULT_N_SLOTS, alpha=DEFAULT_ALPHA, horizon_R=DEFAULT_HORIZON,
                             dt_minutes=DEFAULT_DT_MINUTES):
    """Station parameters of the reference experiment, threshold at 8% of nominal capacity"""
    from evcs_model import StationConfig

    return StationConfig(
        n=n,
        dt_minutes=dt_minutes,
        e_max=DEFAULT_E_MAX,
        c_max=DEFAULT_THRESHOLD_SHARE * n * DEFAULT_E_MAX,
        xi=DEFAULT_XI,
        eta=DEFAULT_ETA,
        alpha=alpha,
        price_schedule=reference_price_schedule(dt_minutes),
        horizon_R=horizon_R,
    )


@dataclass
class ExperimentConfig:
    """Everything one sweep needs, loaded from the YAML experiment document"""
    station: Dict[str, Any] = field(default_factory=dict)
    policies: List[str] = field(default_factory=lambda: list(POLICY_NAMES))
    alphas: List[float] = field(default_factory=lambda: [500.0, 1000.0, 5000.0, 50000.0])
    horizon: int = DEFAULT_HORIZON
    samples_K: int = 20
    clusters_K_prime: int = 2
    policy_seeds: List[int] = field(default_factory=lambda: [SEED])
    world_seeds: List[int] = field(default_factory=lambda: [SEED])
    train_trace: Optional[str] = None
    test_trace: Optional[str] = None
    model_path: Optional[str] = None
    synthetic: Optional[Dict[str, Any]] = None
    table_alpha: Optional[float] = None
    solver: Dict[str, Any] = field(default_factory=dict)
    output_dir: str = OUTPUT_DIR
    max_workers: int = MAX_WORKERS

    # Where and how fast a sweep runs, not what it computes
    EXECUTION_FIELDS = ('output_dir', 'max_workers')

    def validate(self, require_data=True):
        from evcs_model import ConfigError

        if not self.policies:
            raise ConfigError("experiment needs at least one policy")
        unknown = [p for p in self.policies if p not in POLICY_NAMES]
        if unknown:
            raise ConfigError(f"unknown policies {unknown}, expected some of {POLICY_NAMES}")
        if not self.alphas:
            raise ConfigError("experiment needs at least one alpha")
        if any(a <= 0 for a in self.alphas):
            raise ConfigError("alpha values must be positive")
        if not self.policy_seeds or not self.world_seeds:
            raise ConfigError("experiment needs at least one seed per stream")
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if not 1 <= self.clusters_K_prime <= self.samples_K:
            raise ConfigError("need 1 <= K' <= K")
        self.solver = dict(self.solver or {})
        unknown_solver = sorted(set(self.solver) - set(SOLVER_OPTIONS))
        if unknown_solver:
            raise ConfigError(f"unknown solver keys {unknown_solver}, expected some of {SOLVER_OPTIONS}")
        if self.solver.get('backend', SOLVER_BACKENDS[0]) not in SOLVER_BACKENDS:
            raise ConfigError(f"solver backend must be one of {SOLVER_BACKENDS}")
        if self.solver.get('lp_engine', LP_ENGINES[0]) not in LP_ENGINES:
            raise ConfigError(f"solver lp_engine must be one of {LP_ENGINES}")
        if require_data and self.synthetic is None and (self.train_trace is None or self.test_trace is None):
            raise ConfigError("provide either train/test trace paths or a synthetic generator section")
        return self

    def station_config(self, alpha=None, n=None):
        """StationConfig for one sweep cell; n defaults to the trace width when the document omits it"""
        station = dict(self.station)
        n = int(station.pop('n', n or DEFAULT_N_SLOTS))
        dt_minutes = int(station.pop('dt_minutes', DEFAULT_DT_MINUTES))
        base = reference_station_config(n=n, alpha=alpha or self.alphas[0], horizon_R=self.horizon,
                                        dt_minutes=dt_minutes)
        if 'e_max' in station and 'c_max' not in station:
            station['c_max'] = DEFAULT_THRESHOLD_SHARE * n * float(station['e_max'])
        if 'price_schedule' in station:
            station['price_schedule'] = tuple(float(p) for p in station['price_schedule'])
        return replace(base, **station)

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        """Short stable hash of the experiment document, execution settings excluded"""
        document = {k: v for k, v in self.to_dict().items() if k not in self.EXECUTION_FIELDS}
        canonical = json.dumps(document, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:12]


def load_experiment_config(path=None, overrides=None, require_data=True):
    """Load the YAML experiment document and apply CLI overrides"""
    document = {}
    if path:
        with open(path, 'r') as f:
            document = yaml.safe_load(f) or {}

    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = sorted(set(document) - known)
    if unknown:
        from evcs_model import ConfigError
        raise ConfigError(f"unknown experiment keys: {unknown}")

    config = ExperimentConfig(**document)
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(config, key, value)
    return config.validate(require_data)


def split_seed(seed: int, *stream: Any) -> Tuple[int, ...]:
    """Entropy tuple for an independent named random stream"""
    words = [int(seed)]
    for part in stream:
        if isinstance(part, str):
            words.append(int(hashlib.sha256(part.encode('utf-8')).hexdigest()[:8], 16))
        else:
            words.append(int(part))
    return tuple(words)
