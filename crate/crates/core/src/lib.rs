pub mod autodiff;
pub mod data;
pub mod experiment;
pub mod gmm;
pub mod model;
pub mod noise;
pub mod optim;
pub mod router;
pub mod trainer;
