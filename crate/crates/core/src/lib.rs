pub mod acquisition;
pub mod driver;
pub mod gp;
pub mod io;
pub mod metrics;
pub mod nested;
pub mod optim;
pub mod pool;
pub mod targets;
pub mod transforms;
pub mod util;
