fn main() {
    println!("cli placeholder");
}
