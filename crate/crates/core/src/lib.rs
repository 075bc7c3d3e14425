//! Multi-session 3D LiDAR map construction and maintenance.
//!
//! The library covers the full pipeline: per-session submap SLAM with
//! pose-graph optimization ([`submap`], [`pose_graph`]), descriptor-based
//! inter-session loop closure with submap-level voting ([`descriptor`],
//! [`loop_closure`]), joint multi-session alignment ([`pose_graph`]), and
//! removal of low-dynamic objects between overlapping sparse submaps
//! ([`dynamics`]). A deterministic simulator ([`simulator`]) provides
//! synthetic worlds with ground truth for evaluation ([`eval`]), and
//! [`persistence`] stores sessions on disk.

pub mod config;
pub mod descriptor;
pub mod dynamics;
pub mod eval;
pub mod geometry;
pub mod loop_closure;
pub mod persistence;
pub mod pose_graph;
pub mod registration;
pub mod simulator;
pub mod submap;
pub(crate) mod voxel;

pub use config::RunConfig;
pub use geometry::{PointCloud, Pose, Scan, SpatialIndex};
pub use pose_graph::{EdgeKind, LoopEdge, PoseGraph};
pub use submap::{SessionGraph, Submap, SubmapId};

/// Map worker threads over items, preserving input order in the output.
///
/// With the `parallel` feature this fans out on the rayon pool; without it
/// the closure runs sequentially. Either way the result order (and therefore
/// every downstream reduction) is deterministic.
pub(crate) fn map_ordered<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}
