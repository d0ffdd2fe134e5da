//! Membrane-in-the-middle optomechanics: cavity optics, linearized
//! radiation-pressure dynamics and phonon-counting statistics.

pub mod cavity_optics;
pub mod constants;
pub mod linearized_dynamics;
pub mod numeric;
pub mod qnd_stats;
