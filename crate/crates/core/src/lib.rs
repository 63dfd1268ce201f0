//! Outer-product-factored first and second derivatives of small neural
//! networks, with finite-difference and dense oracles to check them.
//!
//! ```
//! use outerprod::factors::{eta_stack, gamma, grad};
//! use outerprod::hessian::{quad_form, Direction, HessianFactors};
//! use outerprod::{forward, ActKind, NetworkSpec, Rng, Sample, WeightSet};
//!
//! let spec = NetworkSpec::new(vec![4, 6, 5], 3, ActKind::Relu)?;
//! let mut rng = Rng::new(7);
//! let ws = WeightSet::random(&spec, &mut rng, 1.0);
//! let s = Sample::random(&spec, &mut rng);
//!
//! let tr = forward(&spec, &ws, &s)?;
//! let gs = gamma(&tr, &spec);
//! let es = eta_stack(&gs, &ws, &spec);
//! let g = grad(&tr, &gs, &es, &ws, &s);
//! assert_eq!(g.u_right.len(), 5);
//!
//! let hf = HessianFactors::new(&spec, &ws, &tr, &s)?;
//! let d = Direction::random(&spec, &mut rng);
//! let curvature = quad_form(&hf, &d, &hf.generator())?;
//! assert!(curvature.is_finite());
//! # Ok::<(), outerprod::Error>(())
//! ```

pub mod blocks;
pub mod error;
pub mod factors;
pub mod fd;
pub mod general;
pub mod hessian;
pub mod linalg;
pub mod net;
pub mod arch;
pub mod reg;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{Mat, Rank3};
pub use net::{forward, ActKind, ForwardTrace, NetworkSpec, ParamLayout, Sample, WeightSet};
pub use rng::Rng;
