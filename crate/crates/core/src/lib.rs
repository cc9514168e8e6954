pub mod cli;
pub mod concentration;
pub mod counterfactual;
pub mod ingest;
pub mod model;
pub mod polarization;
pub mod scorer;
pub mod selectivity;
pub mod synth;
