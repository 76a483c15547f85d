mod support;

#[test]
fn round_trip_is_bit_exact_and_corruption_is_rejected() {
    println!("{}", support::checks::checkpoint_round_trip().unwrap());
}
