//! Text file formats. Floats are written with 17 significant digits so every
//! f64 survives a write → read round trip exactly.

use sigrot::losses::ScaleParams;
use sigrot::training::{Model, PairDataset, PairRecord, ProjectionHead, Split};
use sigrot::DenseMatrix;

use crate::error::{CliError, CliResult};

pub const EMBEDDING_MAGIC: &str = "SIGROT-EMB v1";
pub const MATRIX_MAGIC: &str = "SIGROT-MAT v1";
pub const CHECKPOINT_MAGIC: &str = "SIGROT-CKPT v1";

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn join(values: &[f64], sep: &str) -> String {
    values
        .iter()
        .map(|v| fmt_f64(*v))
        .collect::<Vec<_>>()
        .join(sep)
}

/// Line reader that remembers where it is for diagnostics.
struct Lines<'a> {
    source: &'a str,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line_no: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, source: &'a str) -> Self {
        Self {
            source,
            inner: text.lines().enumerate(),
            line_no: 0,
        }
    }

    /// Next line that is neither blank nor a `#` comment.
    fn next_content(&mut self) -> Option<&'a str> {
        for (i, line) in self.inner.by_ref() {
            self.line_no = i + 1;
            let t = line.trim();
            if !t.is_empty() && !t.starts_with('#') {
                return Some(line);
            }
        }
        None
    }

    fn err(&self, column: usize, msg: impl Into<String>) -> CliError {
        CliError::parse(self.source, self.line_no, column, msg)
    }

    fn eof(&self, what: &str) -> CliError {
        CliError::parse(
            self.source,
            self.line_no + 1,
            1,
            format!("unexpected end of file, expected {what}"),
        )
    }
}

/// Splits on `sep`, yielding each piece with its one-based column.
fn fields(line: &str, sep: char, base_col: usize) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut col = base_col;
    for piece in line.split(sep) {
        out.push((col, piece));
        col += piece.chars().count() + 1;
    }
    out
}

/// Splits on runs of whitespace, yielding each token with its one-based column.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let chars: Vec<(usize, char)> = line.char_indices().collect();
    for (ci, &(bi, ch)) in chars.iter().enumerate() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some(ci),
            (true, Some(s)) => {
                out.push((s + 1, &line[chars[s].0..bi]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s + 1, &line[chars[s].0..]));
    }
    out
}

fn parse_float(lines: &Lines, col: usize, text: &str) -> CliResult<f64> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| lines.err(col, format!("'{text}' is not a number")))?;
    if !v.is_finite() {
        return Err(lines.err(col, format!("non-finite value '{text}'")));
    }
    Ok(v)
}

fn parse_count(lines: &Lines, col: usize, text: &str, what: &str) -> CliResult<usize> {
    text.parse().map_err(|_| {
        lines.err(
            col,
            format!("{what} '{text}' is not a non-negative integer"),
        )
    })
}

fn parse_csv_vector(
    lines: &Lines,
    col: usize,
    text: &str,
    len: usize,
    what: &str,
) -> CliResult<Vec<f64>> {
    let parts = fields(text, ',', col);
    if parts.len() != len {
        return Err(lines.err(
            col,
            format!("{what} has {} values, expected {len}", parts.len()),
        ));
    }
    parts
        .into_iter()
        .map(|(c, p)| parse_float(lines, c, p))
        .collect()
}

fn check_magic(lines: &mut Lines, magic: &str) -> CliResult<Vec<(usize, String)>> {
    let line = lines
        .next_content()
        .ok_or_else(|| lines.eof(&format!("'{magic}' header")))?;
    let toks = tokens(line);
    let expected: Vec<&str> = magic.split(' ').collect();
    let got: Vec<&str> = toks.iter().take(expected.len()).map(|t| t.1).collect();
    if got != expected {
        return Err(lines.err(1, format!("expected header '{magic}'")));
    }
    Ok(toks[expected.len()..]
        .iter()
        .map(|(c, t)| (*c, t.to_string()))
        .collect())
}

pub fn write_embeddings(data: &PairDataset) -> String {
    let (d_img, d_txt, d_g) = data.dims();
    let mut s = format!("{EMBEDDING_MAGIC} {d_img} {d_txt} {d_g}\n");
    for r in data.records() {
        let cols = [
            r.image_id.clone(),
            r.caption_id.clone(),
            r.split.to_string(),
            join(&r.image_feature, ","),
            join(&r.text_feature, ","),
            join(&r.graph_image_feature, ","),
            join(&r.graph_text_feature, ","),
        ];
        s.push_str(&cols.join("\t"));
        s.push('\n');
    }
    s
}

pub fn parse_embeddings(text: &str, source: &str) -> CliResult<PairDataset> {
    let mut lines = Lines::new(text, source);
    let dims = check_magic(&mut lines, EMBEDDING_MAGIC)?;
    if dims.len() != 3 {
        return Err(lines.err(1, "header needs three dimensions: d_img d_txt d_graph"));
    }
    let d_img = parse_count(&lines, dims[0].0, &dims[0].1, "d_img")?;
    let d_txt = parse_count(&lines, dims[1].0, &dims[1].1, "d_txt")?;
    let d_g = parse_count(&lines, dims[2].0, &dims[2].1, "d_graph")?;
    let mut records = Vec::new();
    while let Some(line) = lines.next_content() {
        let f = fields(line, '\t', 1);
        if f.len() != 7 {
            return Err(lines.err(
                1,
                format!("expected 7 tab-separated fields, found {}", f.len()),
            ));
        }
        let split: Split = f[2]
            .1
            .parse()
            .map_err(|_| lines.err(f[2].0, format!("unknown split '{}'", f[2].1)))?;
        let graph_image_feature =
            parse_csv_vector(&lines, f[5].0, f[5].1, d_g, "graph image feature")?;
        let graph_text_feature =
            parse_csv_vector(&lines, f[6].0, f[6].1, d_g, "graph text feature")?;
        for (col, v, name) in [
            (f[5].0, &graph_image_feature, "graph image"),
            (f[6].0, &graph_text_feature, "graph text"),
        ] {
            let n = sigrot::numerics::norm2(v);
            if (n - 1.0).abs() > 1e-6 {
                return Err(lines.err(col, format!("{name} feature has norm {n}, expected 1")));
            }
        }
        records.push(PairRecord {
            image_id: f[0].1.to_string(),
            caption_id: f[1].1.to_string(),
            split,
            image_feature: parse_csv_vector(&lines, f[3].0, f[3].1, d_img, "image feature")?,
            text_feature: parse_csv_vector(&lines, f[4].0, f[4].1, d_txt, "text feature")?,
            graph_image_feature,
            graph_text_feature,
        });
    }
    Ok(PairDataset::new(records, d_img, d_txt, d_g)?)
}

/// Named matrices, one block each.
pub fn write_matrices(blocks: &[(&str, &DenseMatrix)]) -> String {
    let mut s = String::new();
    for (name, m) in blocks {
        s.push_str(&format!(
            "{MATRIX_MAGIC} {name} {} {}\n",
            m.rows(),
            m.cols()
        ));
        for i in 0..m.rows() {
            s.push_str(&join(m.row(i), " "));
            s.push('\n');
        }
    }
    s
}

pub fn parse_matrices(text: &str, source: &str) -> CliResult<Vec<(String, DenseMatrix)>> {
    let mut lines = Lines::new(text, source);
    let mut out = Vec::new();
    while let Some(header) = lines.next_content() {
        let toks = tokens(header);
        if toks.len() != 5 || format!("{} {}", toks[0].1, toks[1].1) != MATRIX_MAGIC {
            return Err(lines.err(
                1,
                format!("expected block header '{MATRIX_MAGIC} <name> <rows> <cols>'"),
            ));
        }
        let name = toks[2].1.to_string();
        let rows = parse_count(&lines, toks[3].0, toks[3].1, "rows")?;
        let cols = parse_count(&lines, toks[4].0, toks[4].1, "cols")?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let line = lines
                .next_content()
                .ok_or_else(|| lines.eof(&format!("row {} of '{name}'", r + 1)))?;
            let toks = tokens(line);
            if toks.len() != cols {
                return Err(lines.err(1, format!("row has {} values, expected {cols}", toks.len())));
            }
            for (c, t) in toks {
                data.push(parse_float(&lines, c, t)?);
            }
        }
        out.push((name, DenseMatrix::from_vec(rows, cols, data)?));
    }
    if out.is_empty() {
        return Err(lines.eof("a matrix block"));
    }
    Ok(out)
}

/// The only matrix in a file, whatever its name.
pub fn parse_single_matrix(text: &str, source: &str) -> CliResult<DenseMatrix> {
    let mut blocks = parse_matrices(text, source)?;
    if blocks.len() != 1 {
        return Err(CliError::parse(
            source,
            1,
            1,
            format!("expected one matrix, found {}", blocks.len()),
        ));
    }
    Ok(blocks.remove(0).1)
}

pub fn write_checkpoint(model: &Model) -> String {
    let mut s = format!("{CHECKPOINT_MAGIC}\n");
    for (name, head) in [
        ("image_head", &model.image_head),
        ("text_head", &model.text_head),
    ] {
        let w = &head.weight;
        s.push_str(&format!("{name} {} {}\n", w.rows(), w.cols()));
        for i in 0..w.rows() {
            s.push_str(&join(w.row(i), " "));
            s.push('\n');
        }
    }
    s.push_str(&format!("tau_prime {}\n", fmt_f64(model.scale.tau_prime)));
    s.push_str(&format!("bias {}\n", fmt_f64(model.scale.bias)));
    s
}

pub fn parse_checkpoint(text: &str, source: &str) -> CliResult<Model> {
    let mut lines = Lines::new(text, source);
    let rest = check_magic(&mut lines, CHECKPOINT_MAGIC)?;
    if !rest.is_empty() {
        return Err(lines.err(rest[0].0, "unexpected text after header"));
    }
    let mut heads = Vec::new();
    for name in ["image_head", "text_head"] {
        let line = lines.next_content().ok_or_else(|| lines.eof(name))?;
        let toks = tokens(line);
        if toks.len() != 3 || toks[0].1 != name {
            return Err(lines.err(1, format!("expected '{name} <rows> <cols>'")));
        }
        let rows = parse_count(&lines, toks[1].0, toks[1].1, "rows")?;
        let cols = parse_count(&lines, toks[2].0, toks[2].1, "cols")?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines
                .next_content()
                .ok_or_else(|| lines.eof(&format!("{name} row")))?;
            let toks = tokens(line);
            if toks.len() != cols {
                return Err(lines.err(1, format!("row has {} values, expected {cols}", toks.len())));
            }
            for (c, t) in toks {
                data.push(parse_float(&lines, c, t)?);
            }
        }
        heads.push(ProjectionHead::new(DenseMatrix::from_vec(
            rows, cols, data,
        )?)?);
    }
    let mut scalar = |name: &str| -> CliResult<f64> {
        let line = lines.next_content().ok_or_else(|| lines.eof(name))?;
        let toks = tokens(line);
        if toks.len() != 2 || toks[0].1 != name {
            return Err(lines.err(1, format!("expected '{name} <value>'")));
        }
        parse_float(&lines, toks[1].0, toks[1].1)
    };
    let tau_prime = scalar("tau_prime")?;
    let bias = scalar("bias")?;
    if lines.next_content().is_some() {
        return Err(lines.err(1, "unexpected content after checkpoint"));
    }
    let text_head = heads.pop().expect("two heads");
    let image_head = heads.pop().expect("two heads");
    if image_head.d_out() != text_head.d_out() {
        return Err(CliError::parse(
            source,
            1,
            1,
            "image and text heads project to different widths",
        ));
    }
    Ok(Model {
        image_head,
        text_head,
        scale: ScaleParams { tau_prime, bias },
    })
}
