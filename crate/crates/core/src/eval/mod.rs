//! Segmentation metrics and the synthetic scene generator.

pub mod metrics;
pub mod scene;

pub use metrics::{
    class_names, confusion, miou, per_density_report, per_density_report_from_profile, MetricsColumn,
    MetricsTable, MiouResult,
};
pub use scene::{generate_scene, mine_spec, plane_spec, Primitive, SceneSpec, Shape};
