//! Architectures not taken from `tch::vision`: the four-layer CNN, AlexNet and
//! a DenseNet-161 with adaptive global pooling, all using torchvision
//! parameter names.

use tch::nn::{self, ModuleT};
use tch::Tensor;

/// Channel widths and hidden size of the four-layer CNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Cnn4Dims {
    pub channels: [i64; 4],
    pub hidden: i64,
}

impl Default for Cnn4Dims {
    fn default() -> Self {
        Cnn4Dims {
            channels: [32, 64, 128, 128],
            hidden: 1024,
        }
    }
}

impl Cnn4Dims {
    /// Spatial side after the four conv / pool stages. Convs are 3×3 with
    /// padding 1; pooling is 2×2, stride 2, ceil mode.
    pub fn feature_side(input_size: i64) -> i64 {
        (0..4).fold(input_size, |s, _| (s + 1) / 2)
    }

    pub fn flat_features(&self, input_size: i64) -> i64 {
        let side = Self::feature_side(input_size);
        self.channels[3] * side * side
    }
}

/// conv(3→32) → conv(32→64) → conv(64→128) → conv(128→128), each followed by
/// ReLU and 2×2 max pooling, then fc(hidden) → dropout(0.5) → fc(classes).
pub fn cnn4(p: &nn::Path, input_size: i64, num_classes: i64, dims: Cnn4Dims) -> impl ModuleT {
    let conv_cfg = nn::ConvConfig {
        padding: 1,
        ..Default::default()
    };
    let mut features = nn::seq_t();
    let mut c_in = 3;
    for (i, &c_out) in dims.channels.iter().enumerate() {
        features = features
            .add(nn::conv2d(p / format!("conv{}", i + 1), c_in, c_out, 3, conv_cfg))
            .add_fn(|xs| xs.relu().max_pool2d([2, 2], [2, 2], [0, 0], [1, 1], true));
        c_in = c_out;
    }
    let flat = dims.flat_features(input_size);
    features
        .add_fn(|xs| xs.flat_view())
        .add(nn::linear(p / "fc1", flat, dims.hidden, Default::default()))
        .add_fn(|xs| xs.relu())
        .add_fn_t(|xs, train| xs.dropout(0.5, train))
        .add(nn::linear(p / "fc2", dims.hidden, num_classes, Default::default()))
}

fn conv2d(p: nn::Path, c_in: i64, c_out: i64, ksize: i64, padding: i64, stride: i64) -> nn::Conv2D {
    let cfg = nn::ConvConfig {
        stride,
        padding,
        bias: false,
        ..Default::default()
    };
    nn::conv2d(p, c_in, c_out, ksize, cfg)
}

fn biased_conv2d(p: nn::Path, c_in: i64, c_out: i64, ksize: i64, padding: i64, stride: i64) -> nn::Conv2D {
    let cfg = nn::ConvConfig {
        stride,
        padding,
        ..Default::default()
    };
    nn::conv2d(p, c_in, c_out, ksize, cfg)
}

fn max_pool3(xs: Tensor) -> Tensor {
    xs.max_pool2d([3, 3], [2, 2], [0, 0], [1, 1], false)
}

/// AlexNet as in torchvision. `tch::vision::alexnet` gives the second
/// convolution padding 1 and stride 2 instead of padding 2 and stride 1, so
/// published weights load but compute different features.
pub fn alexnet(p: &nn::Path, num_classes: i64) -> impl ModuleT {
    let f = p / "features";
    let c = p / "classifier";
    nn::seq_t()
        .add(biased_conv2d(&f / "0", 3, 64, 11, 2, 4))
        .add_fn(|xs| max_pool3(xs.relu()))
        .add(biased_conv2d(&f / "3", 64, 192, 5, 2, 1))
        .add_fn(|xs| max_pool3(xs.relu()))
        .add(biased_conv2d(&f / "6", 192, 384, 3, 1, 1))
        .add_fn(|xs| xs.relu())
        .add(biased_conv2d(&f / "8", 384, 256, 3, 1, 1))
        .add_fn(|xs| xs.relu())
        .add(biased_conv2d(&f / "10", 256, 256, 3, 1, 1))
        .add_fn(|xs| max_pool3(xs.relu()))
        .add_fn(|xs| xs.adaptive_avg_pool2d([6, 6]).flat_view())
        .add_fn_t(|xs, train| xs.dropout(0.5, train))
        .add(nn::linear(&c / "1", 256 * 6 * 6, 4096, Default::default()))
        .add_fn(|xs| xs.relu())
        .add_fn_t(|xs, train| xs.dropout(0.5, train))
        .add(nn::linear(&c / "4", 4096, 4096, Default::default()))
        .add_fn(|xs| xs.relu())
        .add(nn::linear(&c / "6", 4096, num_classes, Default::default()))
}

fn dense_layer(p: nn::Path, c_in: i64, bn_size: i64, growth: i64) -> impl ModuleT {
    let c_inter = bn_size * growth;
    let bn1 = nn::batch_norm2d(&p / "norm1", c_in, Default::default());
    let conv1 = conv2d(&p / "conv1", c_in, c_inter, 1, 0, 1);
    let bn2 = nn::batch_norm2d(&p / "norm2", c_inter, Default::default());
    let conv2 = conv2d(&p / "conv2", c_inter, growth, 3, 1, 1);
    nn::func_t(move |xs, train| {
        let ys = xs
            .apply_t(&bn1, train)
            .relu()
            .apply(&conv1)
            .apply_t(&bn2, train)
            .relu()
            .apply(&conv2);
        Tensor::cat(&[xs, &ys], 1)
    })
}

fn dense_block(p: nn::Path, c_in: i64, bn_size: i64, growth: i64, layers: i64) -> impl ModuleT {
    let mut seq = nn::seq_t();
    for i in 0..layers {
        seq = seq.add(dense_layer(
            &p / format!("denselayer{}", 1 + i),
            c_in + i * growth,
            bn_size,
            growth,
        ));
    }
    seq
}

fn transition(p: nn::Path, c_in: i64, c_out: i64) -> impl ModuleT {
    nn::seq_t()
        .add(nn::batch_norm2d(&p / "norm", c_in, Default::default()))
        .add_fn(|xs| xs.relu())
        .add(conv2d(&p / "conv", c_in, c_out, 1, 0, 1))
        // not avg_pool2d_default: it sets divisor_override = 1, i.e. sums
        .add_fn(|xs| xs.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None::<i64>))
}

/// DenseNet-161: 96 initial features, growth rate 48, blocks (6, 12, 36, 24).
pub fn densenet161(p: &nn::Path, num_classes: i64) -> impl ModuleT {
    const INIT: i64 = 96;
    const GROWTH: i64 = 48;
    const BN_SIZE: i64 = 4;
    const BLOCKS: [i64; 4] = [6, 12, 36, 24];

    let fp = p / "features";
    let mut seq = nn::seq_t()
        .add(conv2d(&fp / "conv0", 3, INIT, 7, 3, 2))
        .add(nn::batch_norm2d(&fp / "norm0", INIT, Default::default()))
        .add_fn(|xs| xs.relu().max_pool2d([3, 3], [2, 2], [1, 1], [1, 1], false));
    let mut features = INIT;
    for (i, &layers) in BLOCKS.iter().enumerate() {
        seq = seq.add(dense_block(
            &fp / format!("denseblock{}", 1 + i),
            features,
            BN_SIZE,
            GROWTH,
            layers,
        ));
        features += layers * GROWTH;
        if i + 1 != BLOCKS.len() {
            seq = seq.add(transition(&fp / format!("transition{}", 1 + i), features, features / 2));
            features /= 2;
        }
    }
    seq.add(nn::batch_norm2d(&fp / "norm5", features, Default::default()))
        .add_fn(|xs| xs.relu().adaptive_avg_pool2d([1, 1]).flat_view())
        .add(nn::linear(p / "classifier", features, num_classes, Default::default()))
}
