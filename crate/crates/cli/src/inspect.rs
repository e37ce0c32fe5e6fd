//! Token-mask grids as text (`0`/`1` characters) or binary PGM images.

use meat_core::meat::TaskMaskSet;

use crate::CliError;

/// Token mask of one layer laid out as the `side × side` patch grid.
pub fn token_grid(set: &TaskMaskSet, layer: usize, side: usize) -> Result<Vec<Vec<bool>>, CliError> {
    let l = set
        .layers
        .get(layer)
        .ok_or_else(|| CliError::Usage(format!("layer {layer} out of range (mask set has {})", set.layers.len())))?;
    if side * side != l.tokens.len() {
        return Err(CliError::Usage(format!("{} tokens do not form a square grid", l.tokens.len())));
    }
    Ok((0..side)
        .map(|r| (0..side).map(|c| l.tokens.get(r * side + c)).collect())
        .collect())
}

pub fn to_text(grid: &[Vec<bool>]) -> String {
    grid.iter()
        .map(|row| row.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>() + "\n")
        .collect()
}

/// Binary greyscale image: active = 255, isolated = 0.
pub fn to_pgm(grid: &[Vec<bool>]) -> Vec<u8> {
    let (h, w) = (grid.len(), grid.first().map_or(0, Vec::len));
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(grid.iter().flatten().map(|&b| if b { 255 } else { 0 }));
    out
}

pub fn parse_text(text: &str) -> Result<Vec<Vec<bool>>, CliError> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.chars()
                .map(|c| match c {
                    '1' => Ok(true),
                    '0' => Ok(false),
                    _ => Err(CliError::Usage(format!("unexpected character {c:?} in mask grid"))),
                })
                .collect()
        })
        .collect()
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Vec<Vec<bool>>, CliError> {
    let bad = |what: &str| CliError::Usage(format!("not a mask PGM: {what}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if data.len() != w * h {
        return Err(bad("raster size does not match header"));
    }
    data.chunks(w.max(1))
        .map(|row| {
            row.iter()
                .map(|&v| match v {
                    255 => Ok(true),
                    0 => Ok(false),
                    _ => Err(bad("pixel values must be 0 or 255")),
                })
                .collect()
        })
        .collect()
}

/// Per-layer active fractions of the token and FFN masks.
pub fn ratio_table(set: &TaskMaskSet) -> String {
    let r = set.activation_ratios();
    let mut out = format!("task {} activation ratios\nlayer  tokens    ffn1    ffn2\n", set.task_id);
    for l in 0..r.tokens.len() {
        out += &format!("{l:>5} {:>7.4} {:>7.4} {:>7.4}\n", r.tokens[l], r.ffn1[l], r.ffn2[l]);
    }
    out
}
