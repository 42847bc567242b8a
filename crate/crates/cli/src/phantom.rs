use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use mtsunet::volumes::nifti_io::{write_mask, write_volume};
use mtsunet::volumes::{generate_phantom, Case, PhantomSpec, MANIFEST_HEADER};

use crate::fail::{CliResult, Failure};
use crate::out::{prepare_out_dir, resolve_out};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MismatchPlan {
    /// Even-numbered cases show the mismatch sign.
    Alternate,
    All,
    None,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Number of cases.
    #[arg(long)]
    pub n: usize,
    /// Output directory; defaults to $MTSUNET_CACHE/phantoms-<seed>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cubic grid edge length in voxels.
    #[arg(long, default_value_t = 32)]
    pub grid: usize,
    #[arg(long)]
    pub core_radius: Option<f64>,
    #[arg(long)]
    pub rim_thickness: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, value_enum, default_value_t = MismatchPlan::Alternate)]
    pub mismatch: MismatchPlan,
    /// Split tag written to every manifest row.
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub force: bool,
}

/// splitmix64 step; decorrelates consecutive case seeds.
fn case_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed.wrapping_add(i.wrapping_add(1).wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn write_case(dir: &Path, case: &Case) -> CliResult<Vec<String>> {
    let case_dir = dir.join(&case.case_id);
    fs::create_dir_all(&case_dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", case_dir.display())))?;
    let mut cells = vec![case.case_id.clone()];
    for (m, v) in case.volumes() {
        let name = format!("{}.nii.gz", m.name());
        write_volume(&case_dir.join(&name), v)?;
        cells.push(format!("{}/{name}", case.case_id));
    }
    let mask = case.mask.as_ref().expect("phantoms carry masks");
    write_mask(&case_dir.join("mask.nii.gz"), mask)?;
    cells.push(format!("{}/mask.nii.gz", case.case_id));
    let l = case.labels;
    cells.extend([l.idh.to_string(), l.codel.to_string(), l.grade.to_string()]);
    Ok(cells)
}

pub fn run(args: PhantomArgs) -> CliResult {
    if args.n == 0 {
        return Err(Failure::usage("nothing to generate: --n must be at least 1"));
    }
    let mut base = PhantomSpec {
        grid: [args.grid; 3],
        ..PhantomSpec::default()
    };
    if let Some(r) = args.core_radius {
        base.core_radius = r;
    }
    if let Some(r) = args.rim_thickness {
        base.rim_thickness = r;
    }
    if let Some(s) = args.noise {
        base.noise_sigma = s;
    }
    base.validate()?;
    let out = resolve_out(args.out, &format!("phantoms-{}", args.seed))?;
    prepare_out_dir(&out, args.force)?;

    let mut rows = Vec::with_capacity(args.n);
    let mut mismatches = 0;
    for i in 0..args.n {
        let mismatch = match args.mismatch {
            MismatchPlan::Alternate => i % 2 == 0,
            MismatchPlan::All => true,
            MismatchPlan::None => false,
        };
        mismatches += usize::from(mismatch);
        let spec = PhantomSpec { mismatch, ..base };
        let mut case = generate_phantom(&spec, case_seed(args.seed, i as u64))?;
        case.case_id = format!("phantom_{i:04}");
        let mut cells = write_case(&out, &case)?;
        cells.push(args.split.clone());
        rows.push(cells);
    }

    let path = out.join("manifest.csv");
    let write = || -> csv::Result<()> {
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(MANIFEST_HEADER)?;
        for r in &rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
    println!(
        "wrote {} phantom cases ({} mismatch, {} without) and {}",
        args.n,
        mismatches,
        args.n - mismatches,
        path.display()
    );
    Ok(())
}
