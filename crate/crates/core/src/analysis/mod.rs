//! Diagnostic analyses of trained models and their rendering.

pub mod accuracy;
pub mod distance;
pub mod render;

pub use accuracy::{
    accuracy_maps_from_view, best_location_histogram, compute_accuracy_maps, AccuracyAnalysis, AccuracyMaps,
    AnalysisParams, BestLocationHistogram, DenseView, Histogram2d, HistogramParams, TARGETS,
};
pub use distance::{edge_distance, point_distance_distribution, DistanceDistribution, DistanceParams, PointConfig};
pub use render::{overlays_for, render_heatmap, render_scene, PointOverlay};
