//! Companion gnuplot scripts for the CSV outputs. Scripts are run from the output
//! directory and write PNGs next to the data.

use std::fmt::Write;

const HEADER: &str = "set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,600\n";

pub fn make_data(dim: usize) -> String {
    let mut s = String::from(HEADER);
    if dim == 1 {
        s.push_str("set output 'data.png'\nplot 'truth.csv' using 2:3 with lines title 'truth', \\\n");
        s.push_str("     'measurements.csv' using 1:2 with points pt 7 ps 0.5 title 'measurements'\n");
    } else {
        s.push_str("set view map\nset output 'truth.png'\nsplot 'truth.csv' using 2:3:4 with points pt 5 ps 0.5 palette notitle\n");
        s.push_str("set output 'measurements.png'\nsplot 'measurements.csv' using 1:2:3 with points pt 5 palette notitle\n");
    }
    s
}

pub fn invert(dim: usize, traces: bool, kde_nodes: &[usize]) -> String {
    let mut s = String::from(HEADER);
    if dim == 1 {
        s.push_str("set output 'v.png'\n");
        s.push_str("plot 'v_errorbars.csv' using 2:4:5 with filledcurves fs transparent solid 0.3 title '3 sd', \\\n");
        s.push_str("     '' using 2:3 with lines title 'CM', 'truth.csv' using 2:3 with lines dt 2 title 'truth'\n");
        s.push_str("set output 'ell.png'\n");
        s.push_str("plot 'ell_errorbars.csv' using 2:4:5 with filledcurves fs transparent solid 0.3 title '1 sd', \\\n");
        s.push_str("     '' using 2:3 with lines title 'CM of ell'\n");
    } else {
        s.push_str("set view map\n");
        s.push_str("set output 'v.png'\nsplot 'estimates.csv' using 2:3:4 with points pt 5 ps 0.5 palette notitle\n");
        s.push_str("set output 'ell.png'\nsplot 'estimates.csv' using 2:3:6 with points pt 5 ps 0.5 palette notitle\n");
    }
    if traces {
        s.push_str("set output 'traces.png'\nset multiplot layout 2,1\n");
        s.push_str("plot 'traces.csv' using 1:3 with lines notitle\n");
        s.push_str("plot 'traces.csv' using 1:5 with lines title 'cumulative mean'\nunset multiplot\n");
    }
    for n in kde_nodes {
        let _ = writeln!(s, "set output 'kde_node{n}.png'\nplot 'kde_node{n}.csv' using 1:2 with lines title 'node {n}'");
    }
    s
}

pub fn realize(dim: usize, count: usize, has_u: bool) -> String {
    let mut s = String::from(HEADER);
    let mut files = vec!["ell".to_string()];
    if has_u {
        files.push("u".into());
    }
    files.extend((0..count).map(|k| format!("realization_{k}")));
    if dim == 2 {
        s.push_str("set view map\n");
    }
    for f in files {
        if dim == 1 {
            let _ = writeln!(s, "set output '{f}.png'\nplot '{f}.csv' using 2:3 with lines notitle");
        } else {
            let _ = writeln!(s, "set output '{f}.png'\nsplot '{f}.csv' using 2:3:4 with points pt 5 ps 0.5 palette notitle");
        }
    }
    s
}

pub fn baseline(dim: usize) -> String {
    let mut s = String::from(HEADER);
    s.push_str("set logscale x\nset output 'baseline.png'\n");
    s.push_str("plot 'baseline.csv' using 1:2 with linespoints title 'max abs error', '' using 1:3 with linespoints title 'rmse'\n");
    s.push_str("unset logscale x\n");
    if dim == 1 {
        s.push_str("set output 'baseline_estimates.png'\nplot 'truth.csv' using 2:3 with lines dt 2 title 'truth'");
        for f in ["estimate_min_rmse", "estimate_min_max_abs", "estimate_long_ell"] {
            let _ = write!(s, ", \\\n     '{f}.csv' using 2:3 with lines title '{f}'");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripts_reference_their_files() {
        assert!(invert(1, true, &[129, 130]).contains("kde_node130.csv"));
        assert!(realize(2, 2, true).contains("realization_1.csv"));
        assert!(baseline(1).contains("estimate_long_ell.csv"));
        assert!(make_data(2).contains("measurements.csv"));
    }
}
