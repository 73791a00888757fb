pub mod gauss_init;
pub mod gaussian;
pub mod geom;
pub mod image;
pub mod loop_graph;
pub mod map_opt;
pub mod pipeline;
pub mod ply;
pub mod spatial;
pub mod splat_render;
pub mod voxel_pca;
