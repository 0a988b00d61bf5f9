fn main() {
    println!("gcagc");
}
