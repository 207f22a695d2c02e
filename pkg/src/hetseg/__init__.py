"""Edge segmentation inference engine, cost analyzer and pipeline simulator."""
from .analysis import CostReport, ablation_report, analyze
from .estimators import EdgeSegmenter, ToySegmenter
from .exceptions import (AllocationError, AnalysisError, BoundsError, ConfigError, ExecutionError,
                         GraphError, HsegError, MetricError, SpecError)
from .graph import Graph, execute, fuse_mrt, plan_layouts, topo_schedule
from .metrics import MetricsReport, evaluate, f_mean, f_measure, iou, j_mean, jaccard_grad, jaccard_loss, miou
from .pipeline import PipelineConfig, SimReport, compare, simulate, sweep
from .tensor import Layout, LogicalTensor, Shape, make_tensor
from .zoo import ConvType, Decoder, ModelConfig, build_model

__version__ = "0.1.0"
