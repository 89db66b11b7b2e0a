//! Post-hoc figures from `run.csv`: stacked task distribution per round and
//! the target-coverage learning curve.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::Failure;

const WIDTH: u32 = 800;
const HEIGHT: u32 = 480;
const MARGIN: u32 = 40;

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

struct RunTable {
    rounds: Vec<f64>,
    probs: Vec<Vec<f64>>,
    coverage: Vec<f64>,
    target_return: Vec<f64>,
}

fn read_run(path: &Path) -> Result<RunTable, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Failure::Usage("run.csv is empty".into()))?
        .split(',')
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Failure::Usage(format!("run.csv lacks column {name}")))
    };
    let (c_round, c_cov, c_ret) = (col("round")?, col("target_coverage")?, col("target_return")?);
    let p_cols: Vec<usize> = (0..)
        .map_while(|i| header.iter().position(|h| *h == format!("p_{i}")))
        .collect();
    let mut t = RunTable {
        rounds: Vec::new(),
        probs: Vec::new(),
        coverage: Vec::new(),
        target_return: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.get(1) == Some(&"aborted") {
            continue;
        }
        let num = |c: usize| {
            f.get(c)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Failure::Usage(format!("run.csv line {} is malformed", i + 2)))
        };
        t.rounds.push(num(c_round)?);
        t.probs.push(p_cols.iter().map(|&c| num(c)).collect::<Result<_, _>>()?);
        t.coverage.push(num(c_cov)?);
        t.target_return.push(num(c_ret)?);
    }
    if t.rounds.is_empty() {
        return Err(Failure::Usage("run.csv has no completed rounds".into()));
    }
    Ok(t)
}

pub fn render(run: &Path, csv_only: bool) -> Result<(), Failure> {
    let table = read_run(&run.join("run.csv"))?;
    if csv_only {
        let arms = table.probs[0].len();
        let mut dist = String::from("round");
        for i in 0..arms {
            dist.push_str(&format!(",p_{i}"));
        }
        dist.push('\n');
        let mut cov = String::from("round,target_coverage,target_return\n");
        for (i, r) in table.rounds.iter().enumerate() {
            let ps: Vec<String> = table.probs[i].iter().map(|p| p.to_string()).collect();
            dist.push_str(&format!("{r},{}\n", ps.join(",")));
            cov.push_str(&format!("{r},{},{}\n", table.coverage[i], table.target_return[i]));
        }
        fs::write(run.join("task_distribution.csv"), dist)?;
        fs::write(run.join("coverage.csv"), cov)?;
        return Ok(());
    }
    save(distribution_image(&table), &run.join("task_distribution.png"))?;
    save(coverage_image(&table), &run.join("coverage.png"))
}

fn save(img: RgbImage, path: &Path) -> Result<(), Failure> {
    img.save(path)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let grey = Rgb([200, 200, 200]);
    for k in 0..=4 {
        let y = plot_y(k as f64 / 4.0);
        for x in MARGIN..WIDTH - MARGIN {
            img.put_pixel(x, y, grey);
        }
    }
    let black = Rgb([0, 0, 0]);
    for y in MARGIN..=HEIGHT - MARGIN {
        img.put_pixel(MARGIN, y, black);
    }
    for x in MARGIN..WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, black);
    }
    img
}

/// Pixel row of a value in [0, 1].
fn plot_y(v: f64) -> u32 {
    let span = (HEIGHT - 2 * MARGIN) as f64;
    HEIGHT - MARGIN - (v.clamp(0.0, 1.0) * span).round() as u32
}

/// Index into `n` samples for pixel column `x`.
fn sample_at(x: u32, n: usize) -> usize {
    let span = (WIDTH - 2 * MARGIN - 1) as f64;
    (((x - MARGIN) as f64 / span) * (n - 1) as f64).round() as usize
}

fn distribution_image(t: &RunTable) -> RgbImage {
    let mut img = canvas();
    for x in MARGIN + 1..WIDTH - MARGIN {
        let probs = &t.probs[sample_at(x, t.rounds.len())];
        let mut lo = 0.0;
        for (i, p) in probs.iter().enumerate() {
            let hi = lo + p;
            let colour = Rgb(PALETTE[i % PALETTE.len()]);
            for y in plot_y(hi)..plot_y(lo) {
                img.put_pixel(x, y, colour);
            }
            lo = hi;
        }
    }
    img
}

fn coverage_image(t: &RunTable) -> RgbImage {
    let mut img = canvas();
    let n = t.coverage.len();
    // Raw curve in light blue, trailing mean over ~5% of rounds on top.
    let window = (n / 20).max(1);
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let s = i + 1 - window.min(i + 1);
            t.coverage[s..=i].iter().sum::<f64>() / (i + 1 - s) as f64
        })
        .collect();
    polyline(&mut img, &t.coverage, Rgb([160, 200, 235]));
    polyline(&mut img, &smooth, Rgb(PALETTE[0]));
    img
}

fn polyline(img: &mut RgbImage, ys: &[f64], colour: Rgb<u8>) {
    let mut prev: Option<u32> = None;
    for x in MARGIN + 1..WIDTH - MARGIN {
        let y = plot_y(ys[sample_at(x, ys.len())]);
        let (a, b) = match prev {
            Some(p) => (p.min(y), p.max(y)),
            None => (y, y),
        };
        for yy in a..=b {
            img.put_pixel(x, yy, colour);
        }
        prev = Some(y);
    }
}
