use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use resospec::catalog::{default_catalog, find};
use resospec::spinmodel::LossConvention;
use resospec::synth::{CampaignTruth, FieldGrid, SynthResonator, SynthScenario, SynthSpecies};
use resospec::trace_io::{load_areas, read_results, ResultRecord, Surface};
use resospec::{rad_to_hz, ProbeGeometry, SpinSpecies};

const FILM: &str = "film defect g=1.85";

fn resospec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resospec"))
        .args(args)
        .env_remove("RESOSPEC_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}: {}",
        o.status.code(),
        stderr(&o)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

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

fn film_campaign(resonators: Vec<SynthResonator>, grid: FieldGrid) -> SynthScenario {
    SynthScenario {
        seed: 11,
        noise_sigma: 2e-4,
        field_grid: grid,
        resonators,
        species: vec![SynthSpecies {
            species: species(FILM),
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

fn standard_grid() -> FieldGrid {
    FieldGrid::Range {
        start_tesla: 0.0,
        stop_tesla: 0.4,
        step_tesla: 0.002,
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

/// Scenario file plus synthesized campaign directory.
fn synthesize(dir: &Path, scn: &SynthScenario) -> (PathBuf, CampaignTruth) {
    let scenario = dir.join("scenario.json");
    write_json(scn, &scenario);
    let out = dir.join("campaign");
    ok(resospec(&[
        "synth",
        "--scenario",
        s(&scenario),
        "--out",
        s(&out),
    ]));
    let truth = CampaignTruth::load(out.join("truth.json")).unwrap();
    (out, truth)
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn campaign_through_cli_recovers_planted_concentration() {
    let tmp = tempfile::tempdir().unwrap();
    let scn = film_campaign(
        vec![
            resonator("A", 5.3e9, 1.2e-5),
            resonator("B", 6.6e9, 2.6e-5),
            resonator("C", 8.0e9, 4.1e-5),
        ],
        standard_grid(),
    );
    let (campaign, truth) = synthesize(tmp.path(), &scn);
    let templates = tmp.path().join("templates.json");
    write_json(&vec![species(FILM)], &templates);
    let areas = tmp.path().join("areas.csv");
    let diagram = tmp.path().join("diagram");

    for rt in &truth.resonators {
        let id = &rt.resonator.resonator_id;
        let manifest = campaign.join(&rt.manifest_path);
        let out = tmp.path().join(format!("{id}.json"));
        let plot = tmp.path().join(format!("{id}.svg"));
        ok(resospec(&[
            "analyze-sweep",
            "--manifest",
            s(&manifest),
            "--templates",
            s(&templates),
            "--out",
            s(&out),
            "--plot",
            s(&plot),
            "--jobs",
            "2",
            "--diagram",
            s(&diagram),
            "--areas",
            s(&areas),
            "--feature",
            FILM,
        ]));
        let records = read_results(&out).unwrap();
        let n_res = records
            .iter()
            .filter(|r| matches!(r, ResultRecord::Resonator { .. }))
            .count();
        assert_eq!(n_res, rt.fields.len());
        let feature = records
            .iter()
            .find_map(|r| match r {
                ResultRecord::Feature { fit, .. } => Some(fit),
                _ => None,
            })
            .expect("feature record");
        let line = &rt.lines[0];
        assert!((feature.center_field - line.center_field_tesla).abs() < 1e-3);
        assert!(
            (feature.area / line.area_tesla - 1.0).abs() < 0.05,
            "{id}: {} vs {}",
            feature.area,
            line.area_tesla
        );
        let svg = std::fs::read_to_string(&plot).unwrap();
        assert!(
            svg.starts_with("<svg") && svg.contains(FILM) && svg.trim_end().ends_with("</svg>")
        );
    }
    assert_eq!(load_areas(&areas).unwrap().len(), 3);

    let conc = tmp.path().join("concentration.json");
    ok(resospec(&[
        "concentration",
        "--areas",
        s(&areas),
        "--participation",
        s(&campaign.join("participation.csv")),
        "--t-nm",
        "3",
        "--convention",
        "paper",
        "--out",
        s(&conc),
    ]));
    let sigma = read_results(&conc)
        .unwrap()
        .into_iter()
        .find_map(|r| match r {
            ResultRecord::Concentration { result, note, .. } => {
                assert!(note.is_some(), "3 nm default carries its caveat");
                Some(result.sigma_surface_cm2())
            }
            _ => None,
        })
        .unwrap();
    assert!((sigma / 3.1e12 - 1.0).abs() < 0.05, "sigma = {sigma:e}");

    // the per-feature diagram collected over the three resonators identifies the film defect
    let diagram_file = diagram.join("film_defect_g_1_85.csv");
    let id_out = ok(resospec(&["species-id", "--diagram", s(&diagram_file)]));
    let records = resospec::trace_io::results_from_str(
        &String::from_utf8(id_out.stdout).unwrap(),
        Path::new("stdout"),
    )
    .unwrap();
    let (fit, label) = match records.as_slice() {
        [ResultRecord::Diagram {
            fit, n_points: 3, ..
        }, ResultRecord::SpeciesMatch { species, .. }] => (*fit, species.label.clone()),
        other => panic!("unexpected records {other:?}"),
    };
    assert!((fit.g - 1.85).abs() < 0.03, "g = {}", fit.g);
    assert_eq!(label, FILM);
}

#[test]
fn species_id_from_known_parameters() {
    let o = ok(resospec(&[
        "species-id",
        "--g",
        "1.77",
        "--delta0-ghz",
        "1.04",
    ]));
    let records = resospec::trace_io::results_from_str(
        &String::from_utf8(o.stdout).unwrap(),
        Path::new("stdout"),
    )
    .unwrap();
    match records.as_slice() {
        [ResultRecord::SpeciesMatch { species, .. }] => {
            assert!(species.label.contains("superoxide"), "{}", species.label);
            assert!((rad_to_hz(species.delta_0) - 1.04e9).abs() < 1e3);
        }
        other => panic!("unexpected records {other:?}"),
    }
}

#[test]
fn synth_is_bit_identical_and_seed_env_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let scn = film_campaign(
        vec![resonator("A", 6e9, 2e-5)],
        FieldGrid::List(vec![0.0, 0.1, 0.2, 0.25]),
    );
    let scenario = tmp.path().join("scenario.json");
    write_json(&scn, &scenario);
    let run = |name: &str, seed: Option<&str>| {
        let out = tmp.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_resospec"));
        cmd.args(["synth", "--scenario", s(&scenario), "--out", s(&out)]);
        match seed {
            Some(v) => cmd.env("RESOSPEC_SEED", v),
            None => cmd.env_remove("RESOSPEC_SEED"),
        };
        ok(cmd.output().unwrap());
        snapshot(&out)
    };
    let a = run("a", None);
    let b = run("b", None);
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let c = run("c", Some("12345"));
    assert_eq!(a.len(), c.len());
    assert_ne!(a, c);
    // the explicit seed equal to the scenario seed reproduces the default run
    assert_eq!(run("d", Some("11")), a);
}

#[test]
fn fit_trace_matches_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let scn = film_campaign(vec![resonator("A", 6e9, 2e-5)], FieldGrid::List(vec![0.0]));
    let (campaign, truth) = synthesize(tmp.path(), &scn);
    let rt = &truth.resonators[0];
    let trace = campaign.join(&rt.fields[0].trace_path);
    let out = tmp.path().join("fit.json");
    ok(resospec(&[
        "fit-trace",
        "--in",
        s(&trace),
        "--geometry",
        "hanger",
        "--out",
        s(&out),
    ]));
    let fit = match read_results(&out).unwrap().as_slice() {
        [ResultRecord::Resonator { fit, .. }] => *fit,
        other => panic!("unexpected records {other:?}"),
    };
    let q_i_true = rt.resonator.q_i;
    assert!(
        (fit.q_i / q_i_true - 1.0).abs() < 0.05,
        "Q_i = {} vs {q_i_true}",
        fit.q_i
    );
    assert!((rad_to_hz(fit.omega_r) / rt.resonator.f_r_hz - 1.0).abs() < 1e-6);
}

#[test]
fn missing_input_is_a_usage_error_naming_the_path() {
    let o = resospec(&[
        "fit-trace",
        "--in",
        "/nonexistent/trace.s1p",
        "--geometry",
        "reflection",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("/nonexistent/trace.s1p"),
        "{}",
        stderr(&o)
    );

    let o = resospec(&[
        "analyze-sweep",
        "--manifest",
        "/nonexistent/manifest.csv",
        "--out",
        "/tmp/x.json",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/manifest.csv"));
}

#[test]
fn bad_flags_are_usage_errors() {
    let o = resospec(&["fit-trace", "--in", "x.s1p", "--geometry", "notch-ish"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("notch-ish"));

    let o = resospec(&[
        "concentration",
        "--areas",
        "a.csv",
        "--participation",
        "p.csv",
        "--convention",
        "other",
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = resospec(&[
        "analyze-sweep",
        "--manifest",
        "m.csv",
        "--out",
        "o.json",
        "--window",
        "0.02,0.4",
    ]);
    assert_eq!(o.status.code(), Some(2), "window values need units");
}

#[test]
fn missing_baseline_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let mut r = resonator("A", 6e9, 2e-5);
    r.q_i_wirebond = None;
    let scn = film_campaign(vec![r], FieldGrid::List(vec![0.02, 0.05, 0.1]));
    let (campaign, truth) = synthesize(tmp.path(), &scn);
    let o = resospec(&[
        "analyze-sweep",
        "--manifest",
        s(&campaign.join(&truth.resonators[0].manifest_path)),
        "--out",
        s(&tmp.path().join("out.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("baseline"), "{}", stderr(&o));
}

#[test]
fn rescaling_to_own_frequency_keeps_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let scn = film_campaign(
        vec![resonator("A", 8e9, 2e-5)],
        FieldGrid::List(vec![0.0, 0.015, 0.025, 0.1, 0.2, 0.3]),
    );
    let (campaign, truth) = synthesize(tmp.path(), &scn);
    let out = tmp.path().join("out.json");
    ok(resospec(&[
        "analyze-sweep",
        "--manifest",
        s(&campaign.join(&truth.resonators[0].manifest_path)),
        "--rescale-ghz",
        "8",
        "--out",
        s(&out),
    ]));
    let records = read_results(&out).unwrap();
    let inputs: Vec<f64> = records
        .iter()
        .filter_map(|r| match r {
            ResultRecord::Resonator { b0, .. } => *b0,
            _ => None,
        })
        .collect();
    let curve = records
        .iter()
        .find_map(|r| match r {
            ResultRecord::LossCurve { curve, .. } => Some(curve),
            _ => None,
        })
        .unwrap();
    assert_eq!(curve.b0().len(), inputs.len());
    for (b, b_in) in curve.b0().iter().zip(&inputs) {
        assert!(
            (b - b_in).abs() <= 1e-6 * b_in.abs().max(1e-3),
            "{b} vs {b_in}"
        );
    }
}
