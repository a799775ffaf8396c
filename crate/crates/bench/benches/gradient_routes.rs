//! Per-step cost of the two aligned-gradient routes on the default model.
//! The first-order dual-meta route needs 4 gradient evaluations; the direct
//! second-order route needs those plus 8 more for its four Hessian-vector
//! products, so it should come out noticeably slower.

use criterion::{criterion_group, criterion_main, Criterion};

use sitestream_bench::GradFixture;
use sitestream_core::dualmeta::{
    direct_sga_grad, dual_meta_grad, BatchObjective, HVP_EPSILON,
};

fn bench_routes(c: &mut Criterion) {
    let fx = GradFixture::new(7);
    let (d, p, ctr, cte) = (
        fx.batch(0, 5),
        fx.batch(5, 5),
        fx.batch(10, 5),
        fx.batch(15, 5),
    );
    let d_obj = BatchObjective { net: &fx.net, batch: &d };
    let p_obj = BatchObjective { net: &fx.net, batch: &p };
    let ctr_obj = BatchObjective { net: &fx.net, batch: &ctr };
    let cte_obj = BatchObjective { net: &fx.net, batch: &cte };

    let mut group = c.benchmark_group("gradient_routes");
    group.bench_function("dual_meta_grad", |b| {
        b.iter(|| {
            dual_meta_grad(&fx.params, &d_obj, &p_obj, &ctr_obj, &cte_obj, 5e-4, 5e-4).unwrap()
        })
    });
    group.bench_function("direct_sga_grad", |b| {
        b.iter(|| {
            direct_sga_grad(
                &fx.params,
                &d_obj,
                &p_obj,
                &ctr_obj,
                &cte_obj,
                5e-4,
                5e-4,
                HVP_EPSILON,
            )
            .unwrap()
        })
    });
    group.bench_function("loss_and_grad_batch5", |b| {
        b.iter(|| fx.net.loss_and_grad(&fx.params, &d).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_routes);
criterion_main!(benches);
