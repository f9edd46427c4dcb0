"""Disk-resident IVF vector search with locality-aware query scheduling."""

from .cache import CachePolicy, ClusterCache, PolicyKind
from .engine import EngineConfig, SearchEngine, SearchRequest, SearchResult, exact_topk, make_engine
from .errors import (CacheFullError, ClusterSchedError, CorruptionError, InvalidArgument, ProtocolError,
                     StorageError)
from .grouping import (ClusterBitmap, PrefetchMetadata, QueryGroup, QueryRecord, form_groups, jaccard_bitmap,
                       jaccard_hash, reorder_batch)
from .loader import ClusterLoader, DiskModel, LoadPlan, makespan, plan_load
from .prefetch import Prefetcher, execute_prefetch
from .vector_index import DiskIndex, build_index, open_index, train_kmeans
from .workload import CorpusParams, OverlapProfile, TrafficConfig, gen_traffic, make_trace, synth_corpus

__version__ = "0.1.0"
