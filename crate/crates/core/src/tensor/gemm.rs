/// Panics unless every element addressed by an `rows × cols` strided view
/// lies inside `buf`.
pub(super) fn check_extent<T>(rows: usize, cols: usize, buf: &[T], strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(strides.0 >= 0 && strides.1 >= 0, "negative gemm strides");
    let last = (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize;
    assert!(last < buf.len(), "gemm view of {rows}x{cols} overruns buffer of {}", buf.len());
}
