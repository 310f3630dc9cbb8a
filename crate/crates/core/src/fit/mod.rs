//! Estimation: Levenberg–Marquardt core, linear zero-quantum fit, Lorentzian
//! ratio fit, NV-axis orientation fit and the combined hyperfine fit.

pub mod dataset;
pub mod hyperfine;
pub mod lm;
pub mod lorentz;
pub mod model;
pub mod orientation;
pub mod zq;

pub use dataset::{assign_lines, axis_angle_deg, Frame, LabFrame, LineRecord, MeasuredDataset, OrientationRecord, RatioRecord};
pub use hyperfine::{
    fit_hyperfine_full, multi_start, Candidate, DetSignConstraint, FitConstraints, FullFitOptions, FullFitReport,
    RABI_XZ_BOUND,
};
pub use lm::{finite_difference_jacobian, lm_minimize, FitResult, LmOptions, ResidualModel, Termination};
pub use lorentz::{fit_lorentzian, lorentzian, LorentzFit, RatioPoint};
pub use model::{ModelPoint, ModelSpec, ParamKind, SpinModel};
pub use orientation::{fit_orientation, synth_lab_dataset, OrientationFit, OrientationModel, OrientationModelKind, OrientationOptions};
pub use zq::{fit_zq_linear, ZqFit, ZqPoint};
