"""Graph pre-training with dual (task + position) prompt nodes.

Pipeline: load a graph, precompute random-walk reachability powers, pick
anchors, pre-train a GNN on hybrid self-supervised tasks with prompt
nodes attached to the loss-bearing targets, then fine-tune per pre-trained
task embedding and keep the best candidate by validation Micro-F1.
"""

from .errors import (
    ConfigError,
    DataFormatError,
    DimensionError,
    DomainError,
    DualPromptError,
    SamplingError,
    TrainingError,
)
from .gnn import GnnConfig
from .graph import (
    Graph,
    KShotSample,
    SplitSpec,
    build_graph,
    load_graph,
    make_split,
    sample_kshot,
    sample_subgraph,
    save_graph,
)
from .prompt import AnchorSet, PromptParams, prompt_graph, select_anchors
from .reachability import (
    ReachabilityCache,
    build_cache,
    build_transition,
    monte_carlo_reach,
    reach,
    total_reach,
)
from .train import (
    ModelCheckpoint,
    TrainConfig,
    build_position_context,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)
from .finetune import (
    EvalRecord,
    finetune_one,
    link_auc,
    micro_f1,
    transferability_test,
)

__version__ = "0.1.0"
