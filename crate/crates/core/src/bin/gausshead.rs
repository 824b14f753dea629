fn main() {
    println!("gausshead");
}
