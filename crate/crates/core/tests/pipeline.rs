use approx::assert_relative_eq;
use num_complex::Complex64;
use resospec::catalog::{default_catalog, find};
use resospec::concentration::{concentration_from_regression, regress_area_vs_participation};
use resospec::resfit::fit_resonance;
use resospec::spinmodel::{spin_temperature, HyperfineSystem, LossConvention};
use resospec::sweep::{
    baseline_subtract, build_diagram, fit_sweep, identify_species, multipeak_fit, DiagramPoint,
};
use resospec::synth::{
    frequency_grid, synth_sweep, synth_trace, CampaignTruth, FieldGrid, ResonanceParams,
    SynthResonator, SynthScenario, SynthSpecies,
};
use resospec::trace_io::{
    join_areas, load_manifest, load_participation, load_sweep, parse_touchstone_s1p,
    write_touchstone_s1p, AreaRecord, Surface, TouchstoneFormat,
};
use resospec::{hz_to_rad, rad_to_hz, ProbeGeometry, SpinSpecies};

fn species(label: &str) -> SpinSpecies {
    find(&default_catalog(), label).unwrap().clone()
}

fn resonator(id: &str, f_r_hz: f64, p_sc: f64) -> SynthResonator {
    SynthResonator {
        resonator_id: id.into(),
        f_r_hz,
        q_i: 4e5,
        q_c: 1.5e5,
        geometry: ProbeGeometry::HANGER,
        phi_0: -0.2,
        tau_ns: 35.0,
        s_inf_abs: 0.7,
        s_inf_arg: 2.0,
        p_f: Some(2.5 * p_sc),
        p_sc: Some(p_sc),
        q_i_wirebond: Some(3e6),
    }
}

fn film_campaign() -> SynthScenario {
    SynthScenario {
        seed: 11,
        noise_sigma: 2e-4,
        field_grid: FieldGrid::Range {
            start_tesla: 0.0,
            stop_tesla: 0.4,
            step_tesla: 0.002,
        },
        resonators: vec![
            resonator("A", 5.3e9, 1.2e-5),
            resonator("B", 6.6e9, 2.6e-5),
            resonator("C", 8.0e9, 4.1e-5),
        ],
        species: vec![SynthSpecies {
            species: species("film defect g=1.85"),
            g_ens_hz: None,
            surface_density_cm2: Some(3.1e12),
            thickness_nm: 3.0,
            surface: Surface::PSc,
            hyperfine_fraction: None,
            spin_temperature_k: None,
        }],
        samples: 401,
        span_linewidths: 20.0,
        b_wirebond_tesla: 0.01,
        convention: LossConvention::Paper,
    }
}

#[test]
fn campaign_on_disk_to_concentration_and_identity() {
    let dir = tempfile::tempdir().unwrap();
    let scn = film_campaign();
    synth_sweep(&scn, dir.path()).unwrap();
    let truth = CampaignTruth::load(dir.path().join("truth.json")).unwrap();
    let film = species("film defect g=1.85");

    let mut areas = Vec::new();
    let mut diagram = Vec::new();
    for rt in &truth.resonators {
        let manifest = load_manifest(dir.path().join(&rt.manifest_path)).unwrap();
        assert_eq!(manifest.resonator_id, rt.resonator.resonator_id);
        let points = fit_sweep(&load_sweep(&manifest).unwrap(), manifest.geometry).unwrap();
        let curve = baseline_subtract(
            &points,
            manifest.q_i_zero_field,
            manifest.q_i_wirebond,
            manifest.b_wirebond,
        )
        .unwrap();
        // loss curve against the planted per-field loss, wire-bond step included
        let kappa_i = hz_to_rad(rt.resonator.f_r_hz) / rt.resonator.q_i;
        for (k, ft) in curve.kappa_s().iter().zip(&rt.fields) {
            assert!(
                (k - ft.kappa_s_rad_s).abs() < 0.1 * kappa_i,
                "B0 = {}: {k} vs {}",
                ft.b0_tesla,
                ft.kappa_s_rad_s
            );
        }
        let line = &rt.lines[0];
        let c = line.center_field_tesla;
        let fit = multipeak_fit(&curve, std::slice::from_ref(&film), (c - 0.12, c + 0.12)).unwrap();
        let f = &fit.features[0];
        assert_relative_eq!(f.peak_height, line.peak_height_rad_s, max_relative = 0.05);
        assert!((f.center_field - c).abs() < 1e-3);
        assert_relative_eq!(f.area, line.area_tesla, max_relative = 0.05);
        areas.push(AreaRecord {
            resonator_id: rt.resonator.resonator_id.clone(),
            area: f.area,
            sigma_area: 0.0,
        });
        diagram.push(
            DiagramPoint::new(
                curve.omega_r_ref(),
                f.center_field,
                f.sigma_center.max(1e-5),
            )
            .unwrap(),
        );
    }

    let table = load_participation(dir.path().join("participation.csv")).unwrap();
    let rows = join_areas(&areas, &table, Surface::PSc).unwrap();
    let reg = regress_area_vs_participation(&rows).unwrap();
    assert!(reg.intercept_consistent_with_zero || reg.intercept.abs() < 0.05 * reg.slope * 4.1e-5);
    let res = concentration_from_regression(&reg, &film, 3e-9, LossConvention::Paper).unwrap();
    assert_relative_eq!(res.sigma_surface_cm2(), 3.1e12, max_relative = 0.05);

    let line = build_diagram(&diagram).unwrap();
    assert!((line.g - 1.85).abs() < 0.02, "g = {}", line.g);
    assert!((rad_to_hz(line.delta_0) - 0.28e9).abs() < 0.05e9);
    let m = identify_species(line.g, line.delta_0, &default_catalog()).unwrap();
    assert_eq!(m.species.label, "film defect g=1.85");
}

#[test]
fn hydrogen_satellites_give_spin_temperature() {
    let mut fields = vec![0.0, 0.001];
    fields.extend((0..10).map(|i| 0.012 + 0.002 * i as f64));
    fields.extend((0..=400).map(|i| 0.235 + 0.25e-3 * i as f64));
    let mut r = resonator("H", 8e9, 3e-5);
    r.q_i_wirebond = None;
    let scn = SynthScenario {
        seed: 5,
        noise_sigma: 1e-4,
        field_grid: FieldGrid::List(fields),
        resonators: vec![r],
        species: vec![SynthSpecies {
            species: species("hydrogen hyperfine"),
            g_ens_hz: Some(450e3),
            surface_density_cm2: None,
            thickness_nm: 3.0,
            surface: Surface::PSc,
            hyperfine_fraction: Some(1.0),
            spin_temperature_k: Some(0.08),
        }],
        samples: 401,
        span_linewidths: 20.0,
        b_wirebond_tesla: 0.01,
        convention: LossConvention::Paper,
    };
    let (traces, lines, _) = resospec::synth::synth_resonator_sweep(&scn, 0).unwrap();
    assert_eq!(lines.len(), 2);
    let points = fit_sweep(&traces, ProbeGeometry::HANGER).unwrap();
    let curve = baseline_subtract(&points, None, None, 0.01).unwrap();
    let fit = multipeak_fit(&curve, &[species("hydrogen hyperfine")], (0.235, 0.335)).unwrap();
    let (lo, hi) = (&fit.features[0], &fit.features[1]);
    assert!(lo.center_field < hi.center_field);
    for (f, t) in [lo, hi].iter().zip(&lines) {
        assert_relative_eq!(f.peak_height, t.peak_height_rad_s, max_relative = 0.05);
    }
    let t = spin_temperature(
        lo.peak_height,
        hi.peak_height,
        &HyperfineSystem::hydrogen(1.42),
        hz_to_rad(8e9),
    )
    .unwrap();
    assert!((t / 0.08 - 1.0).abs() < 0.1, "T = {t}");
}

#[test]
fn touchstone_file_fits_like_memory_trace() {
    let dir = tempfile::tempdir().unwrap();
    let p = ResonanceParams::new(hz_to_rad(7.1e9), 3e5, 8e4, ProbeGeometry::REFLECTION)
        .unwrap()
        .with_delay(42e-9)
        .with_s_inf(Complex64::from_polar(0.3, 1.1));
    let grid = frequency_grid(p.omega_r, p.q_l(), 12.0, 601);
    let t = synth_trace(&p, &grid, 1e-3, 3).unwrap();
    let direct = fit_resonance(&t, ProbeGeometry::REFLECTION).unwrap();
    for fmt in [
        TouchstoneFormat::Ri,
        TouchstoneFormat::Ma,
        TouchstoneFormat::Db,
    ] {
        let path = dir.path().join("r.s1p");
        write_touchstone_s1p(&t, &path, fmt).unwrap();
        let fit = fit_resonance(
            &parse_touchstone_s1p(&path).unwrap(),
            ProbeGeometry::REFLECTION,
        )
        .unwrap();
        assert_relative_eq!(fit.q_i, direct.q_i, max_relative = 1e-8);
        assert_relative_eq!(fit.q_c, direct.q_c, max_relative = 1e-8);
    }
    assert_relative_eq!(direct.q_i, 3e5, max_relative = 0.02);
}

#[test]
fn missing_zero_field_reference_is_reported() {
    let mut scn = film_campaign();
    scn.resonators.truncate(1);
    scn.field_grid = FieldGrid::Range {
        start_tesla: 0.004,
        stop_tesla: 0.05,
        step_tesla: 0.002,
    };
    let (traces, _, _) = resospec::synth::synth_resonator_sweep(&scn, 0).unwrap();
    let points = fit_sweep(&traces, ProbeGeometry::HANGER).unwrap();
    let err = baseline_subtract(&points, None, None, 0.01).unwrap_err();
    assert!(err.to_string().contains("zero-field"), "{err}");
    assert!(baseline_subtract(&points, Some(4e5), None, 0.01).is_ok());
}
