pub mod group60;
pub mod microtensor;
pub mod bodymodel;
pub mod equinet;
pub mod trainer;
