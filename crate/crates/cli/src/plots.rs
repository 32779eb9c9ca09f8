//! CSV tables of true and learned kernels.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};

use kdisc::basis::KernelEstimate;
use kdisc::discover::{DiscoveryReport, Method};
use kdisc::kernels::KernelSpec;

const POINTS: usize = 201;

/// Estimates under the column names `av`, `best`, `mf`.
fn columns<'a>(reports: &[&'a DiscoveryReport]) -> [Option<&'a KernelEstimate>; 3] {
    let mut out = [None; 3];
    for r in reports {
        match r.method {
            Method::Rbm => {
                out[0] = r.get("averaging");
                out[1] = r.get("best");
            }
            Method::MeanField => out[2] = Some(&r.estimate),
            Method::KnownS => out[0] = Some(&r.estimate),
        }
    }
    out
}

fn table(
    header: &str,
    (a, b): (f64, f64),
    truth: impl Fn(f64) -> f64,
    cols: &[Option<&KernelEstimate>; 3],
    eval: impl Fn(&KernelEstimate, f64) -> f64,
) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for k in 0..POINTS {
        let r = a + (b - a) * k as f64 / (POINTS - 1) as f64;
        write!(s, "{r},{}", truth(r)).unwrap();
        for c in cols {
            match c {
                Some(e) => write!(s, ",{}", eval(e, r)).unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

/// Writes `<stem>_drift.csv` with columns `r,P_true,P_hat_av,P_hat_best,P_hat_mf`
/// and one `<stem>_diffusion_<c>.csv` per diffusion component. Columns of
/// methods that were not run are left empty.
pub fn write_all(
    dir: &Path,
    stem: &str,
    truth: &KernelSpec,
    reports: &[&DiscoveryReport],
    force: bool,
) -> Result<Vec<PathBuf>> {
    let cols = columns(reports);
    let Some(first) = cols.iter().flatten().next() else { bail!("no estimate to plot") };
    let mut files = vec![(
        dir.join(format!("{stem}_drift.csv")),
        table(
            "r,P_true,P_hat_av,P_hat_best,P_hat_mf",
            first.drift_basis.interval(),
            |r| (truth.drift)(r),
            &cols,
            |e, r| e.eval_drift(r),
        ),
    )];
    for c in 0..first.diffusion.len() {
        let d = truth.diffusion_for(c);
        files.push((
            dir.join(format!("{stem}_diffusion_{c}.csv")),
            table(
                "r,D_true,D_hat_av,D_hat_best,D_hat_mf",
                first.diffusion[c].0.interval(),
                |r| d(r),
                &cols,
                |e, r| e.eval_diff(c, r),
            ),
        ));
    }
    if !force {
        if let Some((p, _)) = files.iter().find(|(p, _)| p.exists()) {
            bail!(kdisc::Error::Config(format!("{} exists (use --force to overwrite)", p.display())));
        }
    }
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir)?;
    }
    for (p, text) in &files {
        fs::write(p, text)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}
