from .errors import BagSOIError, PlanningFailed, TrackingFailed
from .estimation import RimEstimator, RimState, estimate_rim
from .manifold import project_stable_config
from .planner import DeformationPath, plan
from .soigen import generate_bagging_soi, generate_goal_soi
from .control import track_path
from .sim import BagPlant, Scenario, load_scenario
