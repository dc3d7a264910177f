pub mod confidence;
pub mod evaluate;
pub mod loss;
pub mod pseudolabel;
pub mod sample_points;
pub mod segmix;
pub mod simulate;
