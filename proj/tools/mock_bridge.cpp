// Stand-in model process speaking the bridge protocol, backed by the stub
// denoisers and VAEs. Serves stdin/stdout by default, or TCP with --listen.

#include <unistd.h>

#include <CLI11.hpp>
#include <iostream>

#include "anamorph/backends.hpp"
#include "anamorph/wire.hpp"

using namespace anamorph;

int main(int argc, char** argv) {
  CLI::App app{"mock model process for the bridge protocol"};
  std::string vae_spec = "identity", denoiser_name = "target";
  std::uint64_t seed = 0;
  std::size_t channels = 3;
  std::optional<std::size_t> fail_after;
  bool refuse_hello = false;
  std::optional<std::uint16_t> listen;
  bool once = false;
  app.add_option("--vae", vae_spec, "identity or lossy:<k>");
  app.add_option("--denoiser", denoiser_name, "target, blur or noise");
  app.add_option("--seed", seed, "seed for the noise denoiser");
  app.add_option("--channels", channels, "latent channels")->check(CLI::PositiveNumber);
  app.add_option("--fail-after", fail_after, "answer an error after this many tensor requests");
  app.add_flag("--refuse-hello", refuse_hello, "reject the handshake");
  app.add_option("--listen", listen, "serve TCP on this port (0 picks one) instead of stdio");
  app.add_flag("--once", once, "with --listen, exit after the first connection");
  CLI11_PARSE(app, argc, argv);

  try {
    auto vae = make_stub_vae(vae_spec, channels);
    auto denoiser = make_stub_denoiser(denoiser_name, *vae, seed);
    auto session = [&](ByteStream& s) {
      StubResponder r(*denoiser, *vae);
      if (fail_after) r.fail_after(*fail_after);
      r.refuse_hello(refuse_hello);
      r.serve(s);
    };
    if (!listen) {
      FdStream io(STDIN_FILENO, STDOUT_FILENO, false);
      session(io);
      return 0;
    }
    TcpListener server(*listen);
    std::cout << "listening " << server.port() << std::endl;
    do {
      auto conn = server.accept();
      try {
        session(*conn);
      } catch (const Error& e) {
        std::cerr << "mock_bridge: " << e.what() << "\n";
      }
    } while (!once);
  } catch (const std::exception& e) {
    std::cerr << "mock_bridge: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
