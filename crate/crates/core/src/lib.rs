//! 4D (space + time) implicit neural TSDF mapping from posed range scans.
//!
//! The map is a sparse multi-resolution feature grid decoded by a shared
//! MLP into weights over temporal basis functions. Training it from a
//! scan sequence yields a time-varying signed distance field whose first
//! (frozen, constant) basis weight is the static map; thresholding that
//! weight at scan points separates dynamic from static returns.

pub mod basis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod geom;
pub mod grid;
pub mod io;
pub mod mc_tables;
pub mod mesher;
pub mod mlp;
pub mod ply;
pub mod sampling;
pub mod training;
pub mod scan;
pub mod spatial;
pub mod synth;

pub use basis::BasisTable;
pub use config::MapConfig;
pub use error::{Error, Result};
pub use evaluation::{ReconReport, SegReport};
pub use field::{FieldModel, QueryScratch};
pub use geom::{Mat3, Point3, Pose, Vec3};
pub use grid::{FeatureGrid, Stencil, VertexKey};
pub use io::PointClass;
pub use mesher::{MeshMode, MeshingDomain, SliceAxis, TriangleMesh};
pub use mlp::{Mlp, MlpTape};
pub use sampling::{Region, SamplePool, TrainSample};
pub use synth::{GroundTruth, SceneSpec};
pub use training::{LossBreakdown, Trainer};
pub use scan::{assemble_sequence, Scan, ScanSequence};
