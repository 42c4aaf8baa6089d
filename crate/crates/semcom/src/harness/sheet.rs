//! Visual comparison sheets: per main-channel SNR, one lossless PNG laying
//! out original / receiver / eavesdropped tiles, white-box attack on the
//! left and black-box attack on the right of each channel condition, with a
//! labelled header strip.

use std::path::Path;

use crate::types::ImageTensor;

use super::HarnessError;

const GUTTER: usize = 2;
const LABEL_STRIP: usize = 12;

/// One display row: an original, the receiver's reconstruction, and the
/// (white-box, black-box) eavesdropped pair per eavesdropper SNR.
#[derive(Debug, Clone)]
pub struct SheetRow {
    pub original: ImageTensor,
    pub received: ImageTensor,
    /// `(white_box, black_box)` per eavesdropper SNR, in grid order.
    pub eavesdropped: Vec<(ImageTensor, ImageTensor)>,
}

/// All rows for one main-channel SNR.
#[derive(Debug, Clone)]
pub struct ImageGridSheet {
    pub main_snr_db: f64,
    pub eaves_snrs_db: Vec<f64>,
    pub rows: Vec<SheetRow>,
}

impl ImageGridSheet {
    /// Tile columns: original + received + two per eavesdropper SNR.
    pub fn columns(&self) -> usize {
        2 + 2 * self.eaves_snrs_db.len()
    }
}

/// 5x7 bitmap glyphs for the label strip (digits plus the letters used in
/// the fixed captions). Each byte is one row, low 5 bits used.
fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        _ => [0; 7],
    }
}

fn draw_text(canvas: &mut image::RgbImage, x0: usize, y0: usize, text: &str) {
    let mut x = x0;
    for ch in text.chars() {
        let g = glyph(ch);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..5 {
                if bits & (1 << (4 - col)) != 0 {
                    let (px, py) = ((x + col) as u32, (y0 + row) as u32);
                    if px < canvas.width() && py < canvas.height() {
                        canvas.put_pixel(px, py, image::Rgb([255, 255, 255]));
                    }
                }
            }
        }
        x += 6;
    }
}

fn blit_tile(canvas: &mut image::RgbImage, x0: usize, y0: usize, img: &ImageTensor) {
    let (h, w, c) = img.shape();
    for i in 0..h {
        for j in 0..w {
            let mut rgb = [0u8; 3];
            for k in 0..3 {
                let v = img.pixels()[(i, j, k.min(c - 1))];
                rgb[k] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            canvas.put_pixel((x0 + j) as u32, (y0 + i) as u32, image::Rgb(rgb));
        }
    }
}

/// Pixel offset of tile `(row, col)` inside the sheet, with `(width, height)`
/// of the full canvas. Exposed so the decode-back test can find tiles.
pub fn tile_origin(sheet: &ImageGridSheet, tile: usize, row: usize, col: usize) -> (usize, usize) {
    let x = GUTTER + col * (tile + GUTTER);
    let y = LABEL_STRIP + GUTTER + row * (tile + GUTTER);
    (x, y)
}

/// Renders the sheet to a lossless PNG: a label strip on top, then one tile
/// row per sample. For each eavesdropper SNR the white-box reconstruction is
/// on the left, the black-box one on the right.
pub fn emit_image_grid(sheet: &ImageGridSheet, path: &Path) -> Result<(), HarnessError> {
    if sheet.rows.is_empty() {
        return Err(HarnessError::BadConfig("sheet has no rows".into()));
    }
    let tile = sheet.rows[0].original.shape().0;
    for row in &sheet.rows {
        if row.original.shape().0 != tile
            || row.received.shape().0 != tile
            || row.eavesdropped.len() != sheet.eaves_snrs_db.len()
        {
            return Err(HarnessError::BadConfig("inconsistent sheet row shapes".into()));
        }
    }
    let cols = sheet.columns();
    let width = GUTTER + cols * (tile + GUTTER);
    let height = LABEL_STRIP + GUTTER + sheet.rows.len() * (tile + GUTTER);
    let mut canvas = image::RgbImage::from_pixel(width as u32, height as u32, image::Rgb([24, 24, 24]));

    // header labels
    let (x, _) = tile_origin(sheet, tile, 0, 0);
    draw_text(&mut canvas, x, 2, "ORIG");
    let (x, _) = tile_origin(sheet, tile, 0, 1);
    draw_text(&mut canvas, x, 2, "BOB");
    for (e, snr) in sheet.eaves_snrs_db.iter().enumerate() {
        let (x, _) = tile_origin(sheet, tile, 0, 2 + 2 * e);
        draw_text(&mut canvas, x, 2, &format!("WB E={snr:.0}"));
        let (x, _) = tile_origin(sheet, tile, 0, 3 + 2 * e);
        draw_text(&mut canvas, x, 2, &format!("BB E={snr:.0}"));
    }

    for (r, row) in sheet.rows.iter().enumerate() {
        let (x, y) = tile_origin(sheet, tile, r, 0);
        blit_tile(&mut canvas, x, y, &row.original);
        let (x, y) = tile_origin(sheet, tile, r, 1);
        blit_tile(&mut canvas, x, y, &row.received);
        for (e, (wb, bb)) in row.eavesdropped.iter().enumerate() {
            let (x, y) = tile_origin(sheet, tile, r, 2 + 2 * e);
            blit_tile(&mut canvas, x, y, wb);
            let (x, y) = tile_origin(sheet, tile, r, 3 + 2 * e);
            blit_tile(&mut canvas, x, y, bb);
        }
    }

    canvas
        .save(path)
        .map_err(|e| HarnessError::DatasetIo(path.to_path_buf(), std::io::Error::other(e)))?;
    Ok(())
}
