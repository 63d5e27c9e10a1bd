//! Instruction texts sent to the vision-chat model.
//!
//! The two tile templates are reproduced line for line; tests compare captured
//! request bodies against them byte for byte.

/// Tile prompt when the request carries the full image followed by the
/// upsampled crop.
pub const IMAGE_TILE_TEMPLATE: &str = "\
The second image is a low-resolution crop (bicubic upsample) of the first image.
It may appear blurry due to upsampling, but you must ignore the blur.
Compare both and describe the content of the SECOND image (the patch) with extreme detail.
1. Intentional Texture: Based on the object's identity, what is its actual material?
2. Micro-OCR: Transcribe any letters, numbers, or symbols that are unique to this patch.
3. Edge & Shape: Describe the intended sharp edges and structures of the objects in the patch.
STRICT RULE: NEVER use words like 'blurry', 'pixelated', 'noisy', 'low-res', or 'distorted'.
Output ONLY the inferred high-quality keywords, separated by commas.";

/// Tile prompt when the request carries the full sequence followed by the
/// upsampled tube.
pub const VIDEO_TILE_TEMPLATE: &str = "\
The second video is a low-resolution crop (bicubic upsampled) of the first video.
It may appear blurry due to upsampling, but you must ignore the blur.
Compare both and describe the content of the SECOND video (the patch) with extreme detail:
1. Intentional Texture: Based on the object's identity, what is its actual material?
2. Micro-OCR: Transcribe any letters, numbers, or symbols that are unique to this patch.
3. Edge & Shape: Describe the intended sharp edges and structures of the objects in the patch.
STRICT RULE: NEVER use words like 'blurry', 'pixelated', 'noisy', 'low-res', or 'distorted'.
Output ONLY the inferred high-quality keywords, separated by commas.";

/// Crop-only ablation: the request carries just the upsampled crop, so the
/// comparison sentences are dropped and the rest is kept.
pub const CROP_ONLY_TILE_TEMPLATE: &str = "\
This is a low-resolution crop (bicubic upsample) of a larger picture.
It may appear blurry due to upsampling, but you must ignore the blur.
Describe its content with extreme detail.
1. Intentional Texture: Based on the object's identity, what is its actual material?
2. Micro-OCR: Transcribe any letters, numbers, or symbols that are unique to this patch.
3. Edge & Shape: Describe the intended sharp edges and structures of the objects in the patch.
STRICT RULE: NEVER use words like 'blurry', 'pixelated', 'noisy', 'low-res', or 'distorted'.
Output ONLY the inferred high-quality keywords, separated by commas.";

/// Caption request for the single global prompt.
pub const GLOBAL_TEMPLATE: &str = "\
Describe the content of this low-resolution input as a whole.
It may appear blurry, but you must ignore the blur.
STRICT RULE: NEVER use words like 'blurry', 'pixelated', 'noisy', 'low-res', or 'distorted'.
Output ONLY the inferred high-quality keywords, separated by commas.";

pub const DEFAULT_SYSTEM_PROMPT: &str = "\
You are an expert visual analyst assisting a super-resolution model. \
You receive low-resolution media and write precise, keyword-style descriptions \
of what the high-resolution original contains.";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_have_eight_lines_and_key_phrases() {
        for t in [IMAGE_TILE_TEMPLATE, VIDEO_TILE_TEMPLATE] {
            assert_eq!(t.lines().count(), 8);
            assert!(t.contains("STRICT RULE: NEVER use words like 'blurry'"));
            assert!(t.ends_with("Output ONLY the inferred high-quality keywords, separated by commas."));
        }
        assert!(IMAGE_TILE_TEMPLATE.starts_with(
            "The second image is a low-resolution crop (bicubic upsample) of the first image"
        ));
        assert!(VIDEO_TILE_TEMPLATE.starts_with(
            "The second video is a low-resolution crop (bicubic upsampled) of the first video"
        ));
        assert!(VIDEO_TILE_TEMPLATE.contains("(the patch) with extreme detail:\n"));
        assert!(IMAGE_TILE_TEMPLATE.contains("(the patch) with extreme detail.\n"));
    }
}
