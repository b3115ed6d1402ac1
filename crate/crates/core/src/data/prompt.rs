use crate::error::{Error, Result};

/// Number of object tags kept per image.
pub const MAX_OBJECTS: usize = 10;

/// Fills the scene/object template used to build the prompt stream.
pub fn build_prompt<S: AsRef<str>>(scene: &str, objects: &[S]) -> Result<String> {
    if scene.is_empty() {
        return Err(Error::Usage("scene tag must be nonempty".into()));
    }
    if objects.is_empty() || objects.len() > MAX_OBJECTS {
        return Err(Error::Usage(format!(
            "need 1 to {MAX_OBJECTS} object tags, got {}",
            objects.len()
        )));
    }
    let objects: Vec<&str> = objects.iter().map(|o| o.as_ref()).collect();
    Ok(format!(
        "the scene or background of the image is {scene}, and the image contains the following objects: {}",
        objects.join(", ")
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    const PREFIX: &str = "the scene or background of the image is ";

    #[test]
    fn beach_example() {
        assert_eq!(
            build_prompt("beach", &["person", "dog"]).unwrap(),
            "the scene or background of the image is beach, and the image contains the \
             following objects: person, dog"
        );
    }

    #[test]
    fn single_object_has_no_trailing_separator() {
        let p = build_prompt("forest", &["tree"]).unwrap();
        assert!(p.ends_with("objects: tree"));
        assert!(p.starts_with(PREFIX));
    }

    #[test]
    fn ten_objects_in_order() {
        let objs: Vec<String> = (0..10).map(|i| format!("o{i}")).collect();
        let p = build_prompt("room", &objs).unwrap();
        assert!(p.ends_with(&objs.join(", ")));
        let too_many: Vec<String> = (0..11).map(|i| format!("o{i}")).collect();
        assert!(build_prompt("room", &too_many).is_err());
        assert!(matches!(
            build_prompt::<&str>("room", &[]),
            Err(Error::Usage(_))
        ));
    }
}
