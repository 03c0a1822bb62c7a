"""Height-aware aerial visual place recognition.

Two bypass-adapter branches share one frozen backbone stream: the height branch
retrieves a coarse height from a compact height database, which selects the
height-level sub-databases that the place branch then searches.
"""

from .adapter import (
    AdapterParams,
    BranchId,
    BranchState,
    adapter_forward,
    branch_step,
    center_mask,
    init_branch_params,
    load_adapter_weights,
    run_branch,
    save_adapter_weights,
)
from .config import RunConfig
from .database import (
    CameraIntrinsics,
    HeightDatabase,
    HeightPartitionedDatabase,
    Partition,
    PlaceEntry,
    build_partitioned_db,
    height_to_ground_width,
    height_to_level,
    load_db,
    load_height_db,
    save_db,
    save_height_db,
)
from .descriptor import (
    Aggregator,
    BackboneStub,
    DescriptorSet,
    extract_descriptors,
    extract_height_descriptor,
    extract_place_descriptor,
    gem_pool,
    l2_normalize,
    load_descriptors,
    save_descriptors,
)
from .metrics import (
    EvalReport,
    avg_height_error,
    height_recall,
    memory_usage_pct,
    performance_ratio_pct,
    recall_at_n,
)
from .retrieval import (
    HEVPRSystem,
    QueryDescriptors,
    QueryResult,
    RankedList,
    estimate_height,
    full_query,
    he_vpr_query,
    knn,
    select_subdatabases,
)

__version__ = "0.1.0"
