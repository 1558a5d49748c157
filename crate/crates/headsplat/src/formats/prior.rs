//! Lighting prior file: a header `HSLIGHT 1 <D>`, then the 27 mean
//! coefficients, then D rows of 27 floats, one principal direction each.

use std::fmt::Write as _;
use std::path::Path;

use headsplat_core::shading::{LightingPrior, LIGHT_DIM};

use super::{parse_file, write_file, Tokens};
use crate::error::Result;

pub fn parse_prior(text: &str) -> Result<LightingPrior, String> {
    let mut t = Tokens::new(text);
    t.expect("HSLIGHT")?;
    let version: u32 = t.next("version")?;
    if version != 1 {
        return Err(format!("unsupported lighting prior version {version}"));
    }
    let d: usize = t.next("component count")?;
    let mut mean = [0.0; LIGHT_DIM];
    for m in mean.iter_mut() {
        *m = t.next("mean coefficient")?;
    }
    let mut rows = vec![[0.0; LIGHT_DIM]; d];
    for v in rows.iter_mut().flatten() {
        *v = t.next("basis coefficient")?;
    }
    t.finish()?;
    LightingPrior::from_components(mean, &rows).map_err(|e| e.to_string())
}

pub fn emit_prior(prior: &LightingPrior) -> String {
    let mut s = format!("HSLIGHT 1 {}\n", prior.dim);
    let line = |s: &mut String, v: &[f64]| {
        let row: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    };
    line(&mut s, &prior.mean);
    for r in prior.components() {
        line(&mut s, &r);
    }
    s
}

pub fn read_prior(path: &Path) -> Result<LightingPrior> {
    parse_file(path, parse_prior)
}

pub fn write_prior(path: &Path, prior: &LightingPrior) -> Result<()> {
    write_file(path, emit_prior(prior).as_bytes())
}
