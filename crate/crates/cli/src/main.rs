mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use resospec::catalog::{default_catalog, load_catalog};
use resospec::concentration::{
    concentration_from_regression, regress_area_through_origin, regress_area_vs_participation,
    T_LAYER_CAVEAT,
};
use resospec::resfit::fit_resonance;
use resospec::spinmodel::LossConvention;
use resospec::sweep::{
    baseline_subtract, build_diagram, fit_sweep, identify_species, multipeak_fit, rescale_field,
    DiagramPoint, MultipeakFit,
};
use resospec::synth::{synth_sweep, SynthScenario};
use resospec::trace_io::{
    join_areas, load_areas, load_diagram, load_manifest, load_participation, load_sweep,
    load_trace, write_areas, write_diagram, write_results, AreaRecord, ResultRecord, Surface,
};
use resospec::{hz_to_rad, LineShape, ProbeGeometry, SpinSpecies};

/// Environment variable that replaces the seed of a synthetic scenario.
const SEED_ENV: &str = "RESOSPEC_SEED";

#[derive(Parser)]
#[command(
    name = "resospec",
    version,
    about = "Resonator fits, spin-loss curves and surface spin concentrations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one resonance trace (.s1p or CSV).
    FitTrace(FitTraceArgs),
    /// Fit a field sweep, subtract baselines and decompose the loss curve.
    AnalyzeSweep(AnalyzeSweepArgs),
    /// Fit a frequency-field diagram and match it against the catalog.
    SpeciesId(SpeciesIdArgs),
    /// Surface spin concentration from feature areas and participation ratios.
    Concentration(ConcentrationArgs),
    /// Write a synthetic campaign with ground truth.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GeometryArg {
    Reflection,
    Hanger,
}

impl From<GeometryArg> for ProbeGeometry {
    fn from(g: GeometryArg) -> Self {
        match g {
            GeometryArg::Reflection => ProbeGeometry::REFLECTION,
            GeometryArg::Hanger => ProbeGeometry::HANGER,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    Paper,
    Derived,
}

impl From<ConventionArg> for LossConvention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Paper => LossConvention::Paper,
            ConventionArg::Derived => LossConvention::Derived,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SurfaceArg {
    PSc,
    PF,
}

impl From<SurfaceArg> for Surface {
    fn from(s: SurfaceArg) -> Self {
        match s {
            SurfaceArg::PSc => Surface::PSc,
            SurfaceArg::PF => Surface::PF,
        }
    }
}

#[derive(Args)]
struct FitTraceArgs {
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    #[arg(long, value_enum)]
    geometry: GeometryArg,
    /// Results JSON; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resonator_id: Option<String>,
}

#[derive(Args)]
struct AnalyzeSweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Species JSON (catalog format) used as decomposition templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Rescale fields to this resonator frequency, GHz.
    #[arg(long, value_name = "GHZ")]
    rescale_ghz: Option<f64>,
    /// Decomposition window, e.g. `20mT,400mT` (on the rescaled axis when rescaling).
    #[arg(long, value_name = "LO,HI", value_parser = parse_window)]
    window: Option<(f64, f64)>,
    #[arg(long)]
    out: PathBuf,
    /// SVG overlay of the loss curve and fitted components.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Upper bound on concurrent trace fits.
    #[arg(long)]
    jobs: Option<usize>,
    /// Directory of per-feature diagram files to add this resonator's points to.
    #[arg(long, value_name = "DIR")]
    diagram: Option<PathBuf>,
    /// Areas CSV to add this resonator's area of `--feature` to.
    #[arg(long, requires = "feature")]
    areas: Option<PathBuf>,
    /// Feature label whose area goes to `--areas`.
    #[arg(long)]
    feature: Option<String>,
}

#[derive(Args)]
struct SpeciesIdArgs {
    /// Diagram CSV files; their points are pooled.
    #[arg(long, num_args = 1.., required_unless_present = "g", conflicts_with_all = ["g", "delta_0_ghz"])]
    diagram: Vec<PathBuf>,
    /// Catalog JSON; the built-in catalog when absent.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Match a known g-value instead of fitting a diagram.
    #[arg(long, requires = "delta_0_ghz")]
    g: Option<f64>,
    #[arg(long = "delta0-ghz", id = "delta_0_ghz")]
    delta_0_ghz: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConcentrationArgs {
    #[arg(long)]
    areas: PathBuf,
    #[arg(long)]
    participation: PathBuf,
    /// Thickness of the spin-hosting layer, nm.
    #[arg(long, default_value_t = 3.0)]
    t_nm: f64,
    #[arg(long, value_enum, default_value = "paper")]
    convention: ConventionArg,
    /// g-value of the species.
    #[arg(long, default_value_t = 1.85)]
    g: f64,
    #[arg(long, default_value = "g=1.85 feature")]
    label: String,
    #[arg(long, value_enum, default_value = "p-sc")]
    surface: SurfaceArg,
    /// Fix the regression intercept at zero.
    #[arg(long)]
    through_origin: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Field with an explicit unit: `250mT` or `0.25T`.
fn parse_field(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let (num, scale) = if let Some(v) = s.strip_suffix("mT") {
        (v, 1e-3)
    } else if let Some(v) = s.strip_suffix('T') {
        (v, 1.0)
    } else {
        return Err(format!("`{s}` needs a unit suffix, mT or T"));
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| format!("`{s}` is not a field value"))?;
    Ok(v * scale)
}

fn parse_window(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    let (lo, hi) = (parse_field(a)?, parse_field(b)?);
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err("need finite LO < HI".into());
    }
    Ok((lo, hi))
}

fn emit(records: &[ResultRecord], out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_results(records, p)?,
        None => print!("{}", resospec::trace_io::results_to_string(records)),
    }
    Ok(())
}

fn fit_trace(a: FitTraceArgs) -> Result<()> {
    let geometry = a.geometry.into();
    let trace = load_trace(&a.input)?;
    let fit = fit_resonance(&trace, geometry)
        .with_context(|| format!("fitting {}", a.input.display()))?;
    emit(
        &[ResultRecord::Resonator {
            resonator_id: a.resonator_id,
            b0: None,
            fit,
        }],
        a.out.as_deref(),
    )
}

fn slug(label: &str) -> String {
    let mut s: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    while s.contains("__") {
        s = s.replace("__", "_");
    }
    s.trim_matches('_').to_string()
}

/// Replace the row with the same frequency, or add one; rows stay sorted.
fn merge_diagram(path: &Path, point: DiagramPoint) -> Result<()> {
    let mut points = if path.exists() {
        load_diagram(path)?
    } else {
        Vec::new()
    };
    points.retain(|p| (p.omega_r - point.omega_r).abs() > 1e-12 * point.omega_r);
    points.push(point);
    points.sort_by(|a, b| a.omega_r.total_cmp(&b.omega_r));
    write_diagram(&points, path)?;
    Ok(())
}

fn merge_areas(path: &Path, row: AreaRecord) -> Result<()> {
    let mut rows = if path.exists() {
        load_areas(path)?
    } else {
        Vec::new()
    };
    rows.retain(|r| r.resonator_id != row.resonator_id);
    rows.push(row);
    rows.sort_by(|a, b| a.resonator_id.cmp(&b.resonator_id));
    write_areas(&rows, path)?;
    Ok(())
}

fn analyze_sweep(a: AnalyzeSweepArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let templates: Vec<SpinSpecies> = match &a.templates {
        Some(p) => load_catalog(p)?,
        None => Vec::new(),
    };
    let traces = load_sweep(&manifest)?;
    let points = match a.jobs {
        Some(0) => bail!(UsageError("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()?
            .install(|| fit_sweep(&traces, manifest.geometry))?,
        None => fit_sweep(&traces, manifest.geometry)?,
    };
    let curve = baseline_subtract(
        &points,
        manifest.q_i_zero_field,
        manifest.q_i_wirebond,
        manifest.b_wirebond,
    )?;
    let omega_meas = curve.omega_r_ref();
    let (curve, scale) = match a.rescale_ghz {
        Some(ghz) => {
            let w = hz_to_rad(ghz * 1e9);
            (rescale_field(&curve, w)?, w / omega_meas)
        }
        None => (curve, 1.0),
    };

    let fit: Option<MultipeakFit> = if templates.is_empty() {
        None
    } else {
        let window = match a.window {
            Some(w) => w,
            None => {
                let last = curve.b0().last().copied().unwrap_or(0.0);
                ((manifest.b_wirebond * scale).max(0.0) + 1e-12, last)
            }
        };
        Some(multipeak_fit(&curve, &templates, window)?)
    };

    let id = Some(manifest.resonator_id.clone());
    let mut records: Vec<ResultRecord> = points
        .iter()
        .map(|p| ResultRecord::Resonator {
            resonator_id: id.clone(),
            b0: Some(p.b0),
            fit: p.fit,
        })
        .collect();
    records.push(ResultRecord::LossCurve {
        resonator_id: id.clone(),
        curve: curve.clone(),
    });
    if let Some(fit) = &fit {
        for f in &fit.features {
            records.push(ResultRecord::Feature {
                resonator_id: id.clone(),
                fit: f.clone(),
            });
        }
    }
    write_results(&records, &a.out)?;

    if let Some(p) = &a.plot {
        let title = format!("{}: spin-induced loss", manifest.resonator_id);
        std::fs::write(p, plot::loss_curve_svg(&curve, fit.as_ref(), &title))
            .with_context(|| format!("writing {}", p.display()))?;
    }

    if a.diagram.is_some() || a.areas.is_some() {
        let Some(fit) = &fit else {
            bail!(UsageError("--diagram and --areas need --templates".into()));
        };
        if let Some(dir) = &a.diagram {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for f in fit
                .features
                .iter()
                .filter(|f| f.shape != LineShape::PlateauStep && f.peak_height > 0.0)
            {
                // diagram points live on the measured field axis
                let point = DiagramPoint::new(
                    omega_meas,
                    f.center_field / scale,
                    (f.sigma_center / scale).max(1e-6),
                )?;
                merge_diagram(&dir.join(format!("{}.csv", slug(&f.species_label))), point)?;
            }
        }
        if let (Some(path), Some(label)) = (&a.areas, &a.feature) {
            let f = fit
                .features
                .iter()
                .find(|f| &f.species_label == label)
                .ok_or_else(|| UsageError(format!("no fitted feature labelled `{label}`")))?;
            let rel = if f.peak_height > 0.0 {
                f.sigma_height / f.peak_height
            } else {
                0.0
            };
            merge_areas(
                path,
                AreaRecord {
                    resonator_id: manifest.resonator_id.clone(),
                    area: f.area / scale,
                    sigma_area: (f.area * rel / scale).abs(),
                },
            )?;
        }
    }

    eprintln!(
        "{}: {} field points, {} features -> {}",
        manifest.resonator_id,
        points.len(),
        fit.as_ref().map_or(0, |f| f.features.len()),
        a.out.display()
    );
    Ok(())
}

fn species_id(a: SpeciesIdArgs) -> Result<()> {
    let catalog = match &a.catalog {
        Some(p) => load_catalog(p)?,
        None => default_catalog(),
    };
    let mut records = Vec::new();
    let (g, delta_0) = match (a.g, a.delta_0_ghz) {
        (Some(g), Some(d)) => (g, hz_to_rad(d * 1e9)),
        _ => {
            let mut points = Vec::new();
            for p in &a.diagram {
                points.extend(load_diagram(p)?);
            }
            let fit = build_diagram(&points)?;
            records.push(ResultRecord::Diagram {
                label: None,
                fit,
                n_points: points.len(),
            });
            (fit.g, fit.delta_0)
        }
    };
    let m = identify_species(g, delta_0, &catalog)?;
    eprintln!("best match: {} (score {:.3})", m.species.label, m.score);
    records.push(ResultRecord::SpeciesMatch {
        species: m.species,
        score: m.score,
    });
    emit(&records, a.out.as_deref())
}

fn concentration(a: ConcentrationArgs) -> Result<()> {
    if !(a.t_nm > 0.0 && a.t_nm.is_finite()) {
        bail!(UsageError("--t-nm must be positive".into()));
    }
    let areas = load_areas(&a.areas)?;
    let table = load_participation(&a.participation)?;
    let rows = join_areas(&areas, &table, a.surface.into())?;
    let reg = if a.through_origin {
        regress_area_through_origin(&rows)?
    } else {
        regress_area_vs_participation(&rows)?
    };
    let species = SpinSpecies::new(&a.label, a.g, 0.0, 1.0, LineShape::Lorentzian, None)?;
    let t_layer = a.t_nm * 1e-9;
    let result = concentration_from_regression(&reg, &species, t_layer, a.convention.into())?;
    let note = (a.t_nm == 3.0).then(|| T_LAYER_CAVEAT.to_string());
    eprintln!(
        "surface density {:.4e} cm^-2 (slope {:.4e} T, R^2 {:.4})",
        result.sigma_surface_cm2(),
        reg.slope,
        reg.r_squared
    );
    if !reg.intercept_consistent_with_zero {
        eprintln!(
            "warning: intercept {:.3e} T is inconsistent with zero",
            reg.intercept
        );
    }
    emit(
        &[ResultRecord::Concentration {
            species_label: a.label,
            result,
            regression: Some(reg),
            note,
        }],
        a.out.as_deref(),
    )
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut scn = SynthScenario::load(&a.scenario)?;
    if let Ok(v) = std::env::var(SEED_ENV) {
        scn.seed = v
            .trim()
            .parse()
            .map_err(|_| UsageError(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
    }
    let truth = synth_sweep(&scn, &a.out)?;
    let n: usize = truth.resonators.iter().map(|r| r.fields.len()).sum();
    eprintln!(
        "{} resonators, {n} traces, seed {} -> {}",
        truth.resonators.len(),
        scn.seed,
        a.out.display()
    );
    Ok(())
}

/// Input problem detected by the front end itself.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 1 for numerical failures, 2 for input and usage errors.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .find_map(|e| e.downcast_ref::<resospec::Error>())
        .is_some_and(resospec::Error::is_numerical);
    if numerical {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::FitTrace(a) => fit_trace(a),
        Command::AnalyzeSweep(a) => analyze_sweep(a),
        Command::SpeciesId(a) => species_id(a),
        Command::Concentration(a) => concentration(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fields_need_units() {
        assert_eq!(parse_field("250mT"), Ok(0.25));
        assert_eq!(parse_field(" 0.1 T"), Ok(0.1));
        assert!(parse_field("0.1").is_err());
        assert_eq!(parse_window("20mT,0.4T"), Ok((0.02, 0.4)));
        assert!(parse_window("40mT,20mT").is_err());
    }

    #[test]
    fn slugs_are_file_safe() {
        assert_eq!(slug("g=1.85 feature"), "g_1_85_feature");
        assert_eq!(slug("OH radical"), "oh_radical");
    }
}
