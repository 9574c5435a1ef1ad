use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use scbf_core::grid::ScalarField;

use crate::artifacts::{read_field, PSI_FILE};
use crate::commands::CURVE_FILE;

/// Writes gnuplot data and scripts for ψ and, when present, the survival
/// curve. Fields of more than two dimensions are sliced through the
/// maximizer of ψ along the first two axes.
pub fn export_plot(src: &Path, out: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    let psi_path = src.join(PSI_FILE);
    if psi_path.exists() {
        let psi = read_field(&psi_path)?;
        let (data, script) = psi_plot(&psi);
        write(out, "psi.dat", &data, &mut written)?;
        write(out, "psi.gp", &script, &mut written)?;
    }
    if src.join(CURVE_FILE).exists() {
        if src != out {
            std::fs::copy(src.join(CURVE_FILE), out.join(CURVE_FILE))?;
            written.push(CURVE_FILE.to_string());
        }
        write(out, "survival.gp", SURVIVAL_SCRIPT, &mut written)?;
    }
    if written.is_empty() {
        anyhow::bail!("nothing to plot in {}: expected {PSI_FILE} or {CURVE_FILE}", src.display());
    }
    Ok(written)
}

fn write(dir: &Path, name: &str, text: &str, written: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    written.push(name.to_string());
    Ok(())
}

const SURVIVAL_SCRIPT: &str = "\
set datafile separator ','
set key bottom left
set xlabel 't'
set ylabel 'survival'
set logscale y
plot 'curve.csv' skip 1 using 1:4:5 with filledcurves title 'Wilson 95%', \\
     '' skip 1 using 1:3 with lines lw 2 title 'Monte Carlo', \\
     '' skip 1 using 1:6 with lines dt 2 title 'bound'
pause mouse close
";

fn psi_plot(psi: &ScalarField) -> (String, String) {
    let spec = psi.spec();
    let mut data = String::new();
    if spec.dims() == 1 {
        for k in 0..spec.len() {
            let _ = writeln!(data, "{:e} {:e}", spec.coord(0, k), psi.values()[k]);
        }
        let script = "set xlabel 'x'\nset ylabel 'psi'\nplot 'psi.dat' using 1:2 with lines lw 2 notitle\npause mouse close\n";
        return (data, script.to_string());
    }
    let mut base = vec![0usize; spec.dims()];
    spec.multi_index(psi.argmax(), &mut base);
    let mut m = base.clone();
    for i in 0..spec.counts()[0] {
        for j in 0..spec.counts()[1] {
            m[0] = i;
            m[1] = j;
            let v = psi.values()[spec.flat_index(&m)];
            let _ = writeln!(data, "{:e} {:e} {:e}", spec.coord(0, i), spec.coord(1, j), v);
        }
        data.push('\n');
    }
    let mut script = String::new();
    if spec.dims() > 2 {
        let fixed: Vec<String> = (2..spec.dims()).map(|d| format!("x{} = {:.4}", d + 1, spec.coord(d, base[d]))).collect();
        let _ = writeln!(script, "set title 'slice at {}'", fixed.join(", "));
    }
    script.push_str(
        "set xlabel 'x1'\nset ylabel 'x2'\nset view map\nset pm3d at b\nset contour base\nset cntrparam levels discrete 0.5\n\
         splot 'psi.dat' using 1:2:3 with pm3d notitle\npause mouse close\n",
    );
    (data, script)
}
