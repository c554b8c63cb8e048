pub mod backbone;
pub mod ca_cdfa;
pub mod checkpoint;
pub mod datagen;
pub mod domain_id;
pub mod eval_metrics;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod text_anchor;
pub mod trainer;
pub mod vl_rsa;
