//! Digitised MAE-versus-resolution curves for three study areas, used as
//! an evaluation fixture.

use impervia_core::evaluation::MaeCurve;

use crate::{Error, Result};

pub const RESOLUTIONS_KM: [f64; 6] = [0.120, 0.240, 0.480, 0.960, 1.920, 3.840];

pub struct CurveFixture {
    pub name: &'static str,
    pub model: [f64; 6],
    pub null: [f64; 6],
}

pub const FIXTURES: [CurveFixture; 3] = [
    CurveFixture {
        name: "all",
        model: [0.982636, 0.901225, 0.803475, 0.695939, 0.591636, 0.503988],
        null: [0.746934, 0.746716, 0.746416, 0.746184, 0.746098, 0.746069],
    },
    CurveFixture {
        name: "vegas",
        model: [0.554409, 0.510753, 0.463902, 0.419637, 0.379884, 0.345062],
        null: [0.526932, 0.526892, 0.526857, 0.526798, 0.526760, 0.526760],
    },
    CurveFixture {
        name: "chicago",
        model: [1.090583, 1.000458, 0.885915, 0.752842, 0.619066, 0.508764],
        null: [0.601712, 0.601656, 0.601536, 0.601412, 0.601355, 0.601355],
    },
];

pub fn fixture(name: &str) -> Result<(MaeCurve, MaeCurve)> {
    let f = FIXTURES.iter().find(|f| f.name == name).ok_or_else(|| {
        Error::Config(format!("unknown fixture {name}; choose all, vegas or chicago"))
    })?;
    Ok((
        MaeCurve::new(RESOLUTIONS_KM.to_vec(), f.model.to_vec())?,
        MaeCurve::new(RESOLUTIONS_KM.to_vec(), f.null.to_vec())?,
    ))
}
