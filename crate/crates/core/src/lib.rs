pub mod gaussian;
pub mod image;
pub mod linalg;
pub mod ply;
pub mod raster;
pub mod density;
pub mod spatial;
pub mod attention;
pub mod epipolar;
pub mod plane;
pub mod loss;
pub mod scene;
pub mod trainer;
