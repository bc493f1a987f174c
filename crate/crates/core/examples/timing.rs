use rse_core::clustering::{
    approximation_error, build_pi, cluster_coefficients, compute_phi, dissimilarity_matrix,
    form_clusters_target_k,
};
use rse_core::grid::{
    assemble_state_space, build_measurement_matrix, default_sensors, Branch, BusKind, GenParams,
    GridSpec, LoadParams,
};
use rse_core::lti::{decompose_semistable, default_tol_zero, LtiSystem};
use rse_core::sim::{parse_scenario_str, run_pipeline};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
struct Knobs {
    bt: f64,    // gen-load tie 17-18
    bt22: f64,  // gen-load tie 17-22
    wk: f64,    // weak gen-gen ties around buses 21 and 15
    j18: f64,   // gen 18 inertia
    j22: f64,   // gen 22 inertia
    j14: f64,   // load 14 inertia
    d14: f64,   // load 14 damping (0 = trusted-style)
    b1617: f64, // tie 16-17
    b1114: f64, // tie 11-14
    b1524: f64, // tie 15-24
    j8: f64,    // load 8 inertia
    t8: f64,    // bus-8 tie strength
    dg: f64,    // generator damping
}

fn make_grid(k: &Knobs) -> GridSpec {
    let gen_buses = [1usize, 2, 7, 13, 15, 16, 18, 21, 22, 23];
    let mut buses = BTreeMap::new();
    for b in 1..=24 {
        buses.insert(b, if gen_buses.contains(&b) { BusKind::Generator } else { BusKind::Load });
    }
    let mut generators = BTreeMap::new();
    let g = |j: f64, d: f64| GenParams { j, d, t_u: 8.0, t_g: 0.5, k_t: 0.95, r: 0.05, e_t: 1.0 };
    for b in [1, 2, 7, 16] { generators.insert(b, g(25.0, k.dg)); }
    for b in [13, 23] { generators.insert(b, g(35.0, k.dg)); }
    generators.insert(15, g(25.0, k.dg));
    generators.insert(18, g(k.j18, k.dg));
    generators.insert(21, g(25.0, k.dg));
    generators.insert(22, g(k.j22, k.dg));
    let mut loads = BTreeMap::new();
    let l = |j: f64, d: f64, ln: f64| LoadParams { j, d, l_nominal: ln };
    loads.insert(3, l(4.0, 3.0, 1.2));
    loads.insert(4, l(0.3, 3.0, 1.2));
    for b in [5, 6] { loads.insert(b, l(0.3, 3.0, 1.0)); }
    for b in [9, 10] { loads.insert(b, l(0.3, 3.0, 1.7)); }
    for b in [11, 12] { loads.insert(b, l(0.3, 3.0, 0.8)); }
    for b in [19, 20] { loads.insert(b, l(0.3, 3.0, 1.6)); }
    loads.insert(17, l(0.3, 3.0, 1.3));
    loads.insert(8, l(k.j8, 0.0, 1.7));
    loads.insert(14, l(k.j14, k.d14, 1.9));
    loads.insert(24, l(0.3, 3.0, 1.2));
    let br: Vec<(usize, usize, f64)> = vec![
        (1, 2, 6.0),
        (1, 3, 50.0), (1, 5, 50.0), (2, 4, 50.0), (2, 6, 50.0),
        (3, 9, 8.0), (3, 24, 8.0), (4, 9, 8.0),
        (5, 10, 8.0), (6, 10, 8.0),
        (7, 8, k.t8), (8, 9, k.t8), (8, 10, k.t8),
        (9, 11, 40.0), (9, 12, 40.0), (10, 11, 40.0), (10, 12, 40.0),
        (11, 13, 50.0), (11, 14, k.b1114), (12, 13, 50.0),
        (12, 23, 6.0), (13, 23, 6.0),
        (14, 16, 2.0), (15, 16, 8.0), (15, 21, k.wk), (15, 21, k.wk),
        (15, 24, k.b1524),
        (16, 17, k.b1617), (16, 19, 50.0), (17, 18, k.bt), (17, 22, k.bt22),
        (18, 21, k.wk), (18, 21, k.wk), (19, 20, 10.0), (19, 20, 10.0),
        (20, 23, 30.0), (20, 23, 30.0), (21, 22, k.wk),
    ];
    let branches: Vec<Branch> = br.iter().map(|&(f, t, b)| Branch { from: f, to: t, b }).collect();
    GridSpec { base_mva: 100.0, nominal_hz: 60.0, buses, branches, generators, loads }
}

fn evaluate(k: &Knobs, verbose: bool) -> Option<(f64, Vec<f64>, f64)> {
    let grid = make_grid(k);
    grid.validate().ok()?;
    let (sys0, index) = assemble_state_space(&grid).ok()?;
    let sensors = default_sensors(&grid);
    let c = build_measurement_matrix(&grid, &index, &sensors).ok()?;
    let sys = LtiSystem::new(sys0.a().clone(), c.clone()).ok()?;
    let eigs = sys.a().complex_eigenvalues();
    let slowest =
        eigs.iter().filter(|e| e.norm() > 1e-6).map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
    let dec = decompose_semistable(sys.a(), default_tol_zero(sys.a())).ok()?;
    let factor = compute_phi(&sys, &dec).ok()?;
    let load_sc = parse_scenario_str(
        "
duration = 400
dt = 0.001
record_every = 100
[load_events]
3 0.1 20 200
[estimator]
mode = none
",
    )
    .unwrap();
    let clean = run_pipeline(&grid, &load_sc).ok()?;
    let nsamp = clean.sim.y.ncols() as f64;
    if verbose {
        let label_index = |lab: &str| sensors.iter().position(|s| s.label() == lab).unwrap();
        let probes = [
            ("p_b1", "p_b2"), ("p_b1", "p_b7"), ("p_b2", "p_b7"),
            ("p_b13", "p_b15"), ("p_b13", "p_b23"), ("p_b15", "p_b16"),
            ("p_b16", "p_b23"), ("p_b18", "p_b21"), ("p_b18", "p_b22"),
            ("p_b21", "p_b22"), ("p_b16", "p_b18"), ("p_b13", "p_b18"),
            ("p_b1", "p_b13"), ("p_b7", "p_b23"),
            ("omega_b1", "omega_b2"), ("omega_b1", "omega_b9"),
            ("omega_b11", "omega_b13"), ("omega_b17", "omega_b18"),
            ("omega_b1", "omega_b13"), ("omega_b24", "omega_b3"),
            ("omega_b14", "omega_b11"), ("omega_b8", "omega_b7"),
            ("p_b4", "omega_b4"), ("p_b3", "omega_b3"),
            ("p_b1", "omega_b1"), ("p_b24", "omega_b24"),
            ("p_b17", "omega_b17"), ("p_b17", "p_b19"),
            ("omega_b18", "omega_b16"), ("omega_b18", "omega_b19"),
            ("omega_b18", "omega_b22"), ("omega_b18", "p_b17"),
            ("omega_b18", "p_b19"), ("p_b16", "p_b18"),
            ("omega_b21", "omega_b17"), ("omega_b21", "omega_b15"),
            ("p_b8", "p_b14"), ("p_b8", "p_b7"), ("p_b14", "p_b11"),
        ];
        for (a, b) in probes {
            let d = rse_core::dissimilarity(&factor, label_index(a), label_index(b));
            println!("  d({a},{b}) = {d:.4}");
        }
    }
    let mut errs = vec![];
    for kk in [5usize, 10, 21, 40, 48] {
        let cl = form_clusters_target_k(&factor, kk).ok()?;
        let p = cluster_coefficients(&factor, &cl);
        let pi = build_pi(&cl, &p).ok()?;
        let err = approximation_error(&pi, &clean.sim.y).ok()?;
        errs.push(err.aggregate);
        if verbose && (kk == 21 || kk == 10) {
            println!("-- K={kk} clusters (theta {:.4}):", cl.theta);
            let singles: Vec<String> = cl
                .members
                .iter()
                .filter(|ms| ms.len() == 1)
                .map(|ms| sensors[ms[0]].label())
                .collect();
            println!("    singletons: {}", singles.join(" "));
            for members in cl.members.iter().filter(|ms| ms.len() > 1) {
                let desc: Vec<String> = members
                    .iter()
                    .map(|&i| {
                        let sig = clean.sim.y.row(i).norm() / nsamp.sqrt();
                        format!(
                            "{}(p={:+.3},e={:.2},rms={:.2e})",
                            sensors[i].label(),
                            p[i],
                            err.per_measurement[i].unwrap_or(f64::NAN),
                            sig
                        )
                    })
                    .collect();
                println!("    [{}]", desc.join(" "));
            }
        }
    }
    let k21 = errs[2];
    Some((k21, errs, slowest))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() > 1 && args[1] == "emit" {
        let k = Knobs {
            bt: 30.0, bt22: 28.0, wk: 1.0, j18: 45.0, j22: 6.0,
            j14: 1.0, d14: 0.0, b1617: 16.0, b1114: 30.0, b1524: 25.0, j8: 1.0, t8: 15.0, dg: 2.0,
        };
        print!("{}", make_grid(&k).serialize());
        return;
    }
    if args.len() > 1 && args[1] == "att" {
        let j8: f64 = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(1.0);
        let j14a: f64 = args.get(4).and_then(|a| a.parse().ok()).unwrap_or(1.0);
        let t8: f64 = args.get(5).and_then(|a| a.parse().ok()).unwrap_or(15.0);
        let b1114: f64 = args.get(6).and_then(|a| a.parse().ok()).unwrap_or(30.0);
        let dg: f64 = args.get(7).and_then(|a| a.parse().ok()).unwrap_or(2.0);
        let k = Knobs {
            bt: 30.0, bt22: 28.0, wk: 1.0, j18: 45.0, j22: 6.0,
            j14: j14a, d14: 0.0, b1617: 16.0, b1114, b1524: 25.0, j8, t8, dg,
        };
        let grid = make_grid(&k);
        let mut text = String::from(
            "duration = 400\ndt = 0.001\nrecord_every = 100\n\
             [load_events]\n5 0.1 20 200\n6 -0.1 20 200\n\
             [attack]\nwindow = 20 380\nfreq all sin 0.05 0.3\npower gen bias 0.05\n",
        );
        for b in [3usize, 4, 5, 6, 9, 10, 11, 12, 17, 19, 20, 24] {
            text.push_str(&format!("power {b} sin 0.04 0.2\n"));
        }
        let marg: f64 = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(0.2);
        text.push_str(&format!(
            "[estimator]\nmode = resilient\nmargin = {marg}\nclustering = auto\nxhat0 = 0.02\n"
        ));
        let sc = parse_scenario_str(&text).unwrap();
        {
            // diagnostic: observability of the augmented pair at coverage theta
            use rse_core::clustering::{form_clusters, min_theta_for_coverage};
            use rse_core::lti::observability_rank;
            let (sys0, index) = assemble_state_space(&grid).unwrap();
            let sensors = default_sensors(&grid);
            let c = build_measurement_matrix(&grid, &index, &sensors).unwrap();
            let sys = LtiSystem::new(sys0.a().clone(), c.clone()).unwrap();
            let dec = decompose_semistable(sys.a(), default_tol_zero(sys.a())).unwrap();
            let factor = compute_phi(&sys, &dec).unwrap();
            let trusted: Vec<usize> = sensors
                .iter()
                .enumerate()
                .filter(|(_, s)| s.label() == "p_b8")
                .map(|(i, _)| i)
                .collect();
            let attacked: Vec<usize> =
                (0..sensors.len()).filter(|i| !trusted.contains(i)).collect();
            let theta = min_theta_for_coverage(&factor, &trusted).unwrap();
            let cl = form_clusters(&factor, theta).unwrap();
            let p = cluster_coefficients(&factor, &cl);
            let pi = build_pi(&cl, &p).unwrap();
            let (c_bar, _) = rse_core::clustering::augment_measurement_matrix(&c, &pi, &attacked).unwrap();
            let rep = observability_rank(sys.a(), &c_bar, 1e-8);
            println!("coverage theta {theta:.4}, K={}, c_bar rank {}/{}", cl.k(), rep.rank, sys.n());
            // feasibility scan: one trusted sensor per cluster at various K
            for kk in [2usize, 3, 4, 6, 8, 12] {
                let cl = form_clusters_target_k(&factor, kk).unwrap();
                let p = cluster_coefficients(&factor, &cl);
                let pi = build_pi(&cl, &p).unwrap();
                // trusted = max-|p| member of each cluster
                let mut tr: Vec<usize> = Vec::new();
                for ms in &cl.members {
                    let &best = ms
                        .iter()
                        .max_by(|&&a, &&b| p[a].abs().partial_cmp(&p[b].abs()).unwrap())
                        .unwrap();
                    tr.push(best);
                }
                let att: Vec<usize> = (0..sensors.len()).filter(|i| !tr.contains(i)).collect();
                let (cb, _) = rse_core::clustering::augment_measurement_matrix(&c, &pi, &att).unwrap();
                let rk = observability_rank(sys.a(), &cb, 1e-8).rank;
                match rse_core::observer::design_gain(&sys, &cb, 0.05) {
                    Ok(d) => println!(
                        "K={kk}: rank {rk}, gain ok, margin_used {:.3e}, achieved {:.3e}",
                        d.margin_used, d.stability_margin
                    ),
                    Err(e) => println!("K={kk}: rank {rk}, gain FAILED: {e}"),
                }
            }
        }
        let out = match run_pipeline(&grid, &sc) {
            Ok(o) => o,
            Err(e) => {
                println!("pipeline error: {e}");
                return;
            }
        };
        println!("attacked: {} sensors, trusted_observable: {:?}", out.attacked.len(), out.trusted_observable);
        if let Some(cr) = &out.cluster_report {
            println!("clusters: K={} theta={:.4} covered={:?}", cr.k, cr.theta, cr.covered.iter().filter(|&&c| c).count());
        }
        if let Some(obs) = &out.observer {
            println!("observer: mode={:?} margin_req={} used={} achieved={} rows={}",
                obs.mode, obs.margin_requested, obs.margin_used, obs.margin_achieved, obs.c_rows);
        }
        // post-transient relative state RMS
        let xh = out.sim.x_hat.as_ref().unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for (j, &t) in out.sim.t.iter().enumerate() {
            if t >= 250.0 {
                num += (xh.column(j) - out.sim.x.column(j)).norm_squared();
                den += out.sim.x.column(j).norm_squared();
            }
        }
        println!("post-transient relative state RMS: {:.4}  (den_rms {:.3e})", (num / den).sqrt(), (den / 1.0).sqrt());
        if let Some(cr) = &out.cluster_report {
            let mut off = 0usize;
            for (ci, cl) in cr.clusters.iter().enumerate() {
                let mut top: Vec<(f64, usize)> = cl.iter().cloned()
                    .zip(cr.coefficients[off..off + cl.len()].iter().cloned())
                    .map(|(m, c)| (c.abs(), m)).collect();
                off += cl.len();
                top.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                let desc: Vec<String> = top.iter().take(8)
                    .map(|(c, m)| format!("{}:{:.3}", out.sensors[*m].label(), c)).collect();
                println!("cluster {ci} ({} members) top |p|: {}", cl.len(), desc.join(" "));
            }
        }
        // slow spectrum of A
        let (sysd, _) = assemble_state_space(&grid).unwrap();
        let mut eigs: Vec<_> = sysd.a().complex_eigenvalues().iter().cloned().collect();
        eigs.sort_by(|a, b| b.re.partial_cmp(&a.re).unwrap());
        println!("slowest eigenvalues of A:");
        for ev in eigs.iter().take(8) {
            println!("  {:+.4e} {:+.4e}i", ev.re, ev.im);
        }
        // per-sensor surrogate mismatch on the metric window (y_bar vs y)
        let cols: Vec<usize> = out.sim.t.iter().enumerate()
            .filter(|(_, &t)| t >= 250.0).map(|(j, _)| j).collect();
        println!("worst surrogate mismatches (t>=250):");
        let mut mm: Vec<(f64, usize)> = (0..out.sensors.len()).map(|i| {
            let mut n2 = 0.0; let mut d2 = 0.0;
            for &j in &cols {
                n2 += (out.sim.y_bar[(i, j)] - out.sim.y[(i, j)]).powi(2);
                d2 += out.sim.y[(i, j)].powi(2);
            }
            ((n2 / d2.max(1e-300)).sqrt(), i)
        }).collect();
        mm.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for (e, i) in mm.iter().take(10) {
            println!("  {} rel {:.3}", out.sensors[*i].label(), e);
        }
        // worst estimated states on the window
        let mut sm: Vec<(f64, usize)> = (0..out.sim.x.nrows()).map(|i| {
            let mut n2 = 0.0;
            for &j in &cols { n2 += (xh[(i, j)] - out.sim.x[(i, j)]).powi(2); }
            (n2.sqrt(), i)
        }).collect();
        sm.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        println!("worst state errors (abs, t>=250):");
        for (e, i) in sm.iter().take(8) {
            println!("  {} {:.3e}", out.state_names[*i], e);
        }
        return;
    }
    if args.len() > 1 && args[1] == "best" {
        // detailed view of one configuration, supplied as six floats
        let v: Vec<f64> = args[2..12].iter().map(|s| s.parse().unwrap()).collect();
        let k = Knobs {
            bt: v[0], bt22: v[1], wk: v[2], j18: v[3], j22: v[4],
            j14: v[5], d14: v[6], b1617: v[7], b1114: v[8], b1524: v[9], j8: 1.0, t8: 15.0, dg: 2.0, dg: 2.0,
        };
        println!("{k:?}");
        if let Some((k21, errs, slowest)) = evaluate(&k, true) {
            println!("slowest Re {slowest:.3e}  errs {errs:?}  K21 {k21:.4}");
        } else {
            println!("evaluation failed");
        }
        return;
    }
    let mut results: Vec<(f64, Knobs, Vec<f64>, f64, bool)> = vec![];
    for &bt in &[26.0, 28.0, 30.0] {
        for &b1617 in &[16.0, 20.0, 24.0, 30.0] {
            for &j22 in &[6.0] {
                let k = Knobs {
                    bt, bt22: 28.0, wk: 1.0, j18: 45.0, j22,
                    j14: 1.0, d14: 0.0, b1617, b1114: 30.0, b1524: 25.0, j8: 1.0, t8: 15.0, dg: 2.0,
                };
                if let Some((k21, errs, slowest)) = evaluate(&k, false) {
                    let mono = errs.windows(2).all(|w| w[1] <= w[0] + 1e-12);
                    results.push((k21, k, errs, slowest, mono));
                }
            }
        }
    }
    results.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    println!("top 20 by K21 aggregate:");
    for (k21, k, errs, slowest, mono) in results.iter().take(20) {
        println!(
            "K21 {:.4} mono {} slowRe {:.2e} errs [{:.3} {:.3} {:.3} {:.3} {:.3}] {:?}",
            k21, mono, slowest, errs[0], errs[1], errs[2], errs[3], errs[4], k
        );
    }
}
