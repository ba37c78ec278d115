//! Grid serialization: a columnar CSV and a small versioned binary format.
//! Both store the space-time steps and round-trip bit-exactly.

use std::io::{BufRead, Read, Write};

use super::grid::{DriverKind, DriverMeta, Orientation, RoughPathGrid};
use crate::error::{Error, Result};
use crate::tensor::SigElement;

pub const GRID_MAGIC: &[u8; 8] = b"RDYNGRID";
pub const GRID_VERSION: u32 = 1;

fn csv_header(big_d: usize) -> String {
    let mut cols = vec!["t_start".to_string(), "t_end".to_string()];
    cols.extend((0..big_d).map(|i| format!("a_{i}")));
    for i in 0..big_d {
        for j in 0..big_d {
            cols.push(format!("b_{i}_{j}"));
        }
    }
    for i in 0..big_d {
        for j in 0..big_d {
            for k in 0..big_d {
                cols.push(format!("c_{i}_{j}_{k}"));
            }
        }
    }
    cols.join(",")
}

fn orientation_name(o: Orientation) -> &'static str {
    match o {
        Orientation::Forward => "forward",
        Orientation::Reversed => "reversed",
    }
}

/// Writes `# key=value` metadata lines, a header and one row per step.
/// Coordinate 0 of every step is time.
pub fn write_grid_csv<W: Write>(grid: &RoughPathGrid, mut w: W) -> Result<()> {
    let meta = grid.meta();
    let big_d = grid.dim() + 1;
    writeln!(w, "# format=roughdyn-grid-csv")?;
    writeln!(w, "# version={GRID_VERSION}")?;
    writeln!(w, "# d={}", grid.dim())?;
    writeln!(w, "# n={}", grid.len())?;
    writeln!(w, "# gamma={:?}", grid.gamma())?;
    writeln!(w, "# kind={}", serde_json::to_string(&meta.kind)?.trim_matches('"'))?;
    if let Some(h) = meta.hurst {
        writeln!(w, "# hurst={h:?}")?;
    }
    if let Some(s) = meta.seed {
        writeln!(w, "# seed={s}")?;
    }
    writeln!(w, "# orientation={}", orientation_name(grid.orientation()))?;
    writeln!(w, "{}", csv_header(big_d))?;
    let times = grid.times();
    let mut line = String::new();
    for (i, g) in grid.spacetime_steps().iter().enumerate() {
        line.clear();
        line.push_str(&format!("{:?},{:?}", times[i], times[i + 1]));
        for x in g.a().iter().chain(g.b()).chain(g.c()) {
            line.push_str(&format!(",{x:?}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("cannot parse {what} value {s:?}")))
}

pub fn read_grid_csv<R: BufRead>(r: R) -> Result<RoughPathGrid> {
    let mut d = None;
    let mut gamma = None;
    let mut kind = DriverKind::Polyline;
    let mut hurst = None;
    let mut seed = None;
    let mut orientation = Orientation::Forward;
    let mut header_seen = false;
    let mut times = Vec::new();
    let mut steps = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim_end();
        if let Some(rest) = line.strip_prefix('#') {
            let (k, v) = rest
                .trim()
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: bad metadata", lineno + 1)))?;
            match k {
                "format" | "n" => {}
                "version" => {
                    if v != GRID_VERSION.to_string() {
                        return Err(Error::Format(format!("unsupported grid version {v}")));
                    }
                }
                "d" => d = Some(v.parse::<usize>().map_err(|_| Error::Format("bad d".into()))?),
                "gamma" => gamma = Some(parse_f64(v, "gamma")?),
                "kind" => {
                    kind = serde_json::from_str(&format!("\"{v}\""))
                        .map_err(|_| Error::Format(format!("unknown driver kind {v}")))?
                }
                "hurst" => hurst = Some(parse_f64(v, "hurst")?),
                "seed" => seed = Some(v.parse().map_err(|_| Error::Format("bad seed".into()))?),
                "orientation" => {
                    orientation = match v {
                        "forward" => Orientation::Forward,
                        "reversed" => Orientation::Reversed,
                        _ => return Err(Error::Format(format!("unknown orientation {v}"))),
                    }
                }
                _ => return Err(Error::Format(format!("unknown metadata key {k}"))),
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let d = d.ok_or_else(|| Error::Format("missing d before data".into()))?;
        let big_d = d + 1;
        if !header_seen {
            if line != csv_header(big_d) {
                return Err(Error::Format(format!("line {}: unexpected header", lineno + 1)));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let want = 2 + big_d + big_d * big_d + big_d * big_d * big_d;
        if fields.len() != want {
            return Err(Error::Format(format!(
                "line {}: expected {want} fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let vals = fields
            .iter()
            .map(|f| parse_f64(f, "grid"))
            .collect::<Result<Vec<_>>>()?;
        if times.is_empty() {
            times.push(vals[0]);
        } else if times.last() != Some(&vals[0]) {
            return Err(Error::Format(format!("line {}: time gap", lineno + 1)));
        }
        times.push(vals[1]);
        let a = vals[2..2 + big_d].to_vec();
        let b = vals[2 + big_d..2 + big_d + big_d * big_d].to_vec();
        let c = vals[2 + big_d + big_d * big_d..].to_vec();
        steps.push(SigElement::from_parts(big_d, a, b, c)?);
    }
    let gamma = gamma.ok_or_else(|| Error::Format("missing gamma".into()))?;
    RoughPathGrid::from_spacetime_steps(
        times,
        steps,
        gamma,
        DriverMeta { kind, hurst, seed },
        orientation,
    )
}

/// Binary layout (little endian): magic, version u32, d u32, N u64,
/// gamma f64, H f64 (NaN when absent), seed flag u8 + seed u64, kind u8,
/// orientation u8, then N+1 times and N space-time steps as `a|b|c`.
pub fn write_grid_binary<W: Write>(grid: &RoughPathGrid, mut w: W) -> Result<()> {
    let meta = grid.meta();
    w.write_all(GRID_MAGIC)?;
    w.write_all(&GRID_VERSION.to_le_bytes())?;
    w.write_all(&(grid.dim() as u32).to_le_bytes())?;
    w.write_all(&(grid.len() as u64).to_le_bytes())?;
    w.write_all(&grid.gamma().to_le_bytes())?;
    w.write_all(&meta.hurst.unwrap_or(f64::NAN).to_le_bytes())?;
    w.write_all(&[meta.seed.is_some() as u8])?;
    w.write_all(&meta.seed.unwrap_or(0).to_le_bytes())?;
    w.write_all(&[meta.kind.code()])?;
    w.write_all(&[matches!(grid.orientation(), Orientation::Reversed) as u8])?;
    for t in grid.times() {
        w.write_all(&t.to_le_bytes())?;
    }
    for g in grid.spacetime_steps() {
        for x in g.a().iter().chain(g.b()).chain(g.c()) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated grid file: {e}")))?;
    Ok(buf)
}

fn take_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| Ok(f64::from_le_bytes(take::<8, _>(r)?))).collect()
}

pub fn read_grid_binary<R: Read>(mut r: R) -> Result<RoughPathGrid> {
    if &take::<8, _>(&mut r)? != GRID_MAGIC {
        return Err(Error::Format("not a roughdyn grid file".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != GRID_VERSION {
        return Err(Error::Format(format!("unsupported grid version {version}")));
    }
    let d = u32::from_le_bytes(take(&mut r)?) as usize;
    let n = u64::from_le_bytes(take(&mut r)?) as usize;
    let gamma = f64::from_le_bytes(take(&mut r)?);
    let hurst = f64::from_le_bytes(take(&mut r)?);
    let has_seed = take::<1, _>(&mut r)?[0] != 0;
    let seed = u64::from_le_bytes(take(&mut r)?);
    let kind = DriverKind::from_code(take::<1, _>(&mut r)?[0])
        .ok_or_else(|| Error::Format("unknown driver kind code".into()))?;
    let orientation = if take::<1, _>(&mut r)?[0] != 0 {
        Orientation::Reversed
    } else {
        Orientation::Forward
    };
    if d == 0 || n == 0 {
        return Err(Error::Format("empty grid".into()));
    }
    let big_d = d + 1;
    let times = take_f64s(&mut r, n + 1)?;
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let a = take_f64s(&mut r, big_d)?;
        let b = take_f64s(&mut r, big_d * big_d)?;
        let c = take_f64s(&mut r, big_d * big_d * big_d)?;
        steps.push(SigElement::from_parts(big_d, a, b, c)?);
    }
    let meta = DriverMeta {
        kind,
        hurst: (!hurst.is_nan()).then_some(hurst),
        seed: has_seed.then_some(seed),
    };
    RoughPathGrid::from_spacetime_steps(times, steps, gamma, meta, orientation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::{fbm_grid, FbmSpec, RandomScenario};

    fn sample() -> RoughPathGrid {
        let spec = FbmSpec {
            hurst: 0.3,
            dim: 2,
            steps: 16,
            horizon: 0.7,
            refine: 4,
            gamma: None,
        };
        fbm_grid(&spec, RandomScenario::new(99)).unwrap()
    }

    fn bits(g: &RoughPathGrid) -> Vec<u64> {
        let mut out: Vec<u64> = g.times().iter().map(|t| t.to_bits()).collect();
        for s in g.spacetime_steps() {
            out.extend(s.a().iter().chain(s.b()).chain(s.c()).map(|x| x.to_bits()));
        }
        out
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let g = sample();
        let mut buf = Vec::new();
        write_grid_csv(&g, &mut buf).unwrap();
        let back = read_grid_csv(&buf[..]).unwrap();
        assert_eq!(bits(&g), bits(&back));
        assert_eq!(g.meta(), back.meta());
        assert_eq!(g.gamma().to_bits(), back.gamma().to_bits());
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let g = sample().reverse_driver(10).unwrap();
        let mut buf = Vec::new();
        write_grid_binary(&g, &mut buf).unwrap();
        let back = read_grid_binary(&buf[..]).unwrap();
        assert_eq!(bits(&g), bits(&back));
        assert_eq!(back.orientation(), Orientation::Reversed);
        assert_eq!(g.meta(), back.meta());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let g = sample();
        let mut buf = Vec::new();
        write_grid_binary(&g, &mut buf).unwrap();
        assert!(read_grid_binary(&buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(read_grid_binary(&buf[..]).is_err());
        assert!(read_grid_csv("# d=1\n# gamma=0.4\nfoo\n".as_bytes()).is_err());
    }
}
