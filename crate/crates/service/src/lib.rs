//! Serving side of volcore: deep-zoom pyramids for each section of a core,
//! the per-core manifest, reader grading records and the HTTP API that
//! exposes them.

pub mod dzi;
pub mod error;
pub mod manifest;
pub mod records;
pub mod server;

pub use dzi::{build_pyramid, DziDescriptor, PyramidPaths, TileParams};
pub use error::{Result, ServiceError};
pub use manifest::{read_manifest, tile_core, CoreManifest, RegistrationSummary};
pub use records::{Diagnosis, GradeRecord, RecordLog};
pub use server::{list_cores, router, router_with_static, serve, CoreEntry};
