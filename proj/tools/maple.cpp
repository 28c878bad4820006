// Placeholder main; the real CLI lands with the subcommands.
int main() { return 0; }
