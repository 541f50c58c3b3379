pub mod adaptation;
pub mod drem;
pub mod experiment;
pub mod matrix;
pub mod numeric;
pub mod parametrization;
pub mod plant;
pub mod sim;
