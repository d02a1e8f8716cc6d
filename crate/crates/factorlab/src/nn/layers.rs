use super::NetError;

/// Declarative layer description. Shapes below exclude the batch dimension;
/// spatial shapes are `[height, width, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Fully connected `[f] -> [units]`.
    Dense { units: usize },
    /// Valid convolution, stride 1, `[h, w, c] -> [h-kh+1, w-kw+1, filters]`.
    Conv2d { filters: usize, kernel: (usize, usize) },
    Relu,
    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    MaxPool2x2,
    Flatten,
    /// Inverted dropout: active only in training mode, identity at rate 0.
    Dropout { rate: f64 },
    /// Row-wise softmax over a 1-d feature shape.
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Output shape for a given input shape, or a build error naming the
    /// offending layer.
    pub fn infer_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>, NetError> {
        let fail = |reason: String| {
            Err(NetError::BadLayer {
                index,
                kind: self.kind(),
                reason,
            })
        };
        match self {
            LayerSpec::Dense { units } => {
                if *units == 0 {
                    return fail("units must be positive".into());
                }
                match input {
                    [_f] => Ok(vec![*units]),
                    other => fail(format!("expects a flat input, got {other:?}")),
                }
            }
            LayerSpec::Conv2d { filters, kernel } => {
                let (kh, kw) = *kernel;
                if *filters == 0 || kh == 0 || kw == 0 {
                    return fail("filters and kernel dims must be positive".into());
                }
                match input {
                    [h, w, c] if kh <= *h && kw <= *w => {
                        let _ = c;
                        Ok(vec![h - kh + 1, w - kw + 1, *filters])
                    }
                    [h, w, _] => fail(format!("kernel {kh}x{kw} exceeds input {h}x{w}")),
                    other => fail(format!("expects [h, w, c] input, got {other:?}")),
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2x2 => match input {
                [h, w, c] if *h >= 2 && *w >= 2 => Ok(vec![h / 2, w / 2, *c]),
                other => fail(format!("expects [h>=2, w>=2, c] input, got {other:?}")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return fail(format!("rate {rate} outside [0, 1)"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Softmax => match input {
                [_f] => Ok(input.to_vec()),
                other => fail(format!("expects a flat input, got {other:?}")),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_inference() {
        let conv = LayerSpec::Conv2d {
            filters: 4,
            kernel: (3, 3),
        };
        assert_eq!(conv.infer_shape(0, &[16, 16, 3]).unwrap(), vec![14, 14, 4]);
        assert_eq!(
            LayerSpec::MaxPool2x2.infer_shape(0, &[14, 14, 4]).unwrap(),
            vec![7, 7, 4]
        );
        assert_eq!(
            LayerSpec::MaxPool2x2.infer_shape(0, &[7, 7, 4]).unwrap(),
            vec![3, 3, 4]
        );
        assert_eq!(
            LayerSpec::Flatten.infer_shape(0, &[3, 3, 4]).unwrap(),
            vec![36]
        );
        assert_eq!(
            LayerSpec::Dense { units: 10 }.infer_shape(0, &[36]).unwrap(),
            vec![10]
        );
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let conv = LayerSpec::Conv2d {
            filters: 1,
            kernel: (5, 5),
        };
        let err = conv.infer_shape(2, &[4, 4, 1]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 2"), "{msg}");
        assert!(msg.contains("conv2d"), "{msg}");
    }

    #[test]
    fn dense_on_spatial_input_is_rejected() {
        let err = LayerSpec::Dense { units: 3 }
            .infer_shape(0, &[4, 4, 1])
            .unwrap_err();
        assert!(err.to_string().contains("flat input"));
    }

    #[test]
    fn dropout_rate_bounds() {
        assert!(LayerSpec::Dropout { rate: 0.0 }.infer_shape(0, &[5]).is_ok());
        assert!(LayerSpec::Dropout { rate: 1.0 }.infer_shape(0, &[5]).is_err());
        assert!(LayerSpec::Dropout { rate: -0.1 }.infer_shape(0, &[5]).is_err());
    }
}
