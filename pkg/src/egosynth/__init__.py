"""Guided diffusion for synthetic multi-agent driving scenes and ego-centric planning data."""
from .geometry import (AgentState, OrientedBox, VehicleDims, box_iou, polygon_iou, transform_from_ego,
                       transform_to_ego, wrap_angle)
from .scene import Scene
from .maps import MapGrid, MapSpec, bbox_lattice, crop_ego, generate_map, is_onroad, sample_bbox_grid
from .guides import (GuideConfig, agent_collision_guide, evaluate_guides, guide_gradient,
                     map_collision_guide, speed_guide, total_guide)
from .diffusion import (Denoiser, VarianceSchedule, default_schedule, forward_sample, generate_scene,
                        guided_reverse_step, load_checkpoint, reverse_step, save_checkpoint, train_denoiser)
from .ego import EgoInstance, build_instances, export_dataset, filter_instances, import_dataset, select_ego
from .metrics import (collision_rate, planning_l2, planning_loss, realism_metric, rule_metric,
                      wasserstein_1d)

__version__ = "0.1.0"
