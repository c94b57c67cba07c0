use std::fmt::Write as _;
use std::path::Path;

use crate::cloud::LabeledCloud;
use crate::error::{CoreError, Result};

/// First token of the header line of a cloud file.
pub const CLOUD_MAGIC: &str = "# podseg-cloud v1";

/// Renders a cloud in the text format. Floats use the shortest decimal
/// representation that parses back to the same bits.
pub fn format_cloud(cloud: &LabeledCloud) -> String {
    let mut columns = String::from("x,y,z");
    if cloud.sem.is_some() {
        columns.push_str(",sem");
    }
    if cloud.inst.is_some() {
        columns.push_str(",inst");
    }
    let mut out = String::with_capacity(cloud.len() * 48);
    let _ = writeln!(out, "{CLOUD_MAGIC} columns={columns}");
    for (i, p) in cloud.coords.iter().enumerate() {
        let _ = write!(out, "{:?} {:?} {:?}", p[0], p[1], p[2]);
        if let Some(sem) = &cloud.sem {
            let _ = write!(out, " {}", sem[i]);
        }
        if let Some(inst) = &cloud.inst {
            let _ = write!(out, " {}", inst[i]);
        }
        out.push('\n');
    }
    out
}

pub fn write_cloud(cloud: &LabeledCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_cloud(cloud)).map_err(|e| CoreError::io(path, e))
}

/// Reads a cloud file; the sample id is the file stem.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<LabeledCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_cloud(&text, id, path)
}

#[derive(Clone, Copy)]
struct Columns {
    sem: bool,
    inst: bool,
}

impl Columns {
    fn width(self) -> usize {
        3 + self.sem as usize + self.inst as usize
    }
}

fn parse_header(line: &str) -> std::result::Result<Columns, String> {
    let rest = line
        .strip_prefix(CLOUD_MAGIC)
        .ok_or_else(|| format!("expected header `{CLOUD_MAGIC} columns=...`"))?;
    let cols = rest
        .trim()
        .strip_prefix("columns=")
        .ok_or("header lacks `columns=`")?;
    match cols {
        "x,y,z" => Ok(Columns { sem: false, inst: false }),
        "x,y,z,sem" => Ok(Columns { sem: true, inst: false }),
        "x,y,z,inst" => Ok(Columns { sem: false, inst: true }),
        "x,y,z,sem,inst" => Ok(Columns { sem: true, inst: true }),
        other => Err(format!("unsupported columns `{other}`")),
    }
}

pub fn parse_cloud(text: &str, id: impl Into<String>, path: &Path) -> Result<LabeledCloud> {
    let err = |line: usize, msg: String| CoreError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut columns = None;
    let mut coords = Vec::new();
    let mut sem = Vec::new();
    let mut inst = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let lineno = k + 1;
        let line = raw.trim();
        if line.starts_with(CLOUD_MAGIC) {
            if columns.is_some() || !coords.is_empty() {
                return Err(err(lineno, "header must be the first line".into()));
            }
            columns = Some(parse_header(line).map_err(|m| err(lineno, m))?);
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let cols = match columns {
            Some(c) => c,
            None => {
                // Headerless files are accepted; the first row fixes the layout.
                let c = match fields.len() {
                    3 => Columns { sem: false, inst: false },
                    4 => Columns { sem: true, inst: false },
                    5 => Columns { sem: true, inst: true },
                    n => return Err(err(lineno, format!("expected 3 to 5 columns, found {n}"))),
                };
                columns = Some(c);
                c
            }
        };
        if fields.len() != cols.width() {
            return Err(err(
                lineno,
                format!("expected {} columns, found {}", cols.width(), fields.len()),
            ));
        }
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = fields[a]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(lineno, format!("invalid coordinate `{}`", fields[a])))?;
        }
        coords.push(p);
        let mut next = 3;
        if cols.sem {
            sem.push(
                fields[next]
                    .parse::<u32>()
                    .map_err(|_| err(lineno, format!("invalid class `{}`", fields[next])))?,
            );
            next += 1;
        }
        if cols.inst {
            inst.push(
                fields[next]
                    .parse::<i32>()
                    .map_err(|_| err(lineno, format!("invalid instance `{}`", fields[next])))?,
            );
        }
    }
    let cols = columns.unwrap_or(Columns { sem: false, inst: false });
    Ok(LabeledCloud {
        id: id.into(),
        coords,
        sem: cols.sem.then_some(sem),
        inst: cols.inst.then_some(inst),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<LabeledCloud> {
        parse_cloud(text, "t", Path::new("t.txt"))
    }

    #[test]
    fn unlabeled_file() {
        let c = parse(&format!("{CLOUD_MAGIC} columns=x,y,z\n0 1 2\n0.5 0.25 1e-3\n")).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.sem.is_none() && c.inst.is_none());
        let c = parse("0 1 2\n3 4 5\n").unwrap();
        assert!(c.sem.is_none());
    }

    #[test]
    fn bad_line_reports_number() {
        let text = format!("{CLOUD_MAGIC} columns=x,y,z\n0 0 0\na b c\n");
        match parse(&text) {
            Err(CoreError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let short = format!("{CLOUD_MAGIC} columns=x,y,z,sem\n0 0 0\n");
        assert!(matches!(parse(&short), Err(CoreError::Parse { line: 2, .. })));
        let nan = format!("{CLOUD_MAGIC} columns=x,y,z\nNaN 0 0\n");
        assert!(parse(&nan).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plant_7.txt");
        let c = LabeledCloud::new("plant_7", vec![[0.1, -2.5e-7, 3.0], [1.0 / 3.0, 0.0, -0.0]])
            .with_sem(vec![1, 0])
            .with_inst(vec![4, -1]);
        write_cloud(&c, &path).unwrap();
        assert_eq!(read_cloud(&path).unwrap(), c);
    }

    proptest! {
        #[test]
        fn text_round_trip_is_bit_exact(
            pts in prop::collection::vec(prop::array::uniform3(-1e6f64..1e6), 0..50),
            labeled in any::<bool>(),
        ) {
            let n = pts.len();
            let mut c = LabeledCloud::new("t", pts);
            if labeled {
                c = c.with_sem((0..n as u32).map(|i| i % 2).collect())
                    .with_inst((0..n as i32).map(|i| if i % 2 == 1 { i } else { -1 }).collect());
            }
            let back = parse(&format_cloud(&c)).unwrap();
            prop_assert_eq!(back.coords.len(), c.coords.len());
            for (a, b) in back.coords.iter().zip(&c.coords) {
                for k in 0..3 {
                    prop_assert_eq!(a[k].to_bits(), b[k].to_bits());
                }
            }
            prop_assert_eq!(back.sem, c.sem);
            prop_assert_eq!(back.inst, c.inst);
        }
    }
}
